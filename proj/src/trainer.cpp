// SPDX-License-Identifier: Apache-2.0
#include "prophy/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "prophy/annotation.hpp"
#include "prophy/container.hpp"
#include "prophy/tape.hpp"

namespace prophy::train {

namespace {

std::string fmt_double(double x) {
  std::ostringstream out;
  out << std::setprecision(17) << x;
  return out.str();
}

double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    require(pos == s.size(), "trainer: trailing junk in value for '" + key + "'");
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw Error("trainer: bad number '" + s + "' for '" + key + "'");
  }
}

std::int64_t parse_int(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    std::int64_t v = std::stoll(s, &pos);
    require(pos == s.size(), "trainer: trailing junk in value for '" + key + "'");
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw Error("trainer: bad integer '" + s + "' for '" + key + "'");
  }
}

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    std::uint64_t v = std::stoull(s, &pos);
    require(pos == s.size(), "trainer: trailing junk in value for '" + key + "'");
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw Error("trainer: bad integer '" + s + "' for '" + key + "'");
  }
}

std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    out.push_back(static_cast<int>(parse_int(part, key)));
  return out;
}

std::string int_list_csv(const std::vector<int>& v) {
  std::ostringstream out;
  for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
  return out.str();
}

void apply_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  model::BackboneConfig& m = cfg.model;
  if (key == "steps") cfg.steps = parse_int(value, key);
  else if (key == "batch") cfg.batch = static_cast<int>(parse_int(value, key));
  else if (key == "lr") cfg.lr = parse_double(value, key);
  else if (key == "schedule") cfg.schedule = schedule_from_name(value);
  else if (key == "restarts") cfg.restarts = static_cast<int>(parse_int(value, key));
  else if (key == "cfg_dropout") cfg.cfg_dropout = parse_double(value, key);
  else if (key == "lambda1") cfg.weights.lambda1 = parse_double(value, key);
  else if (key == "lambda2") cfg.weights.lambda2 = parse_double(value, key);
  else if (key == "lambda3") cfg.weights.lambda3 = parse_double(value, key);
  else if (key == "seed") cfg.seed = parse_u64(value, key);
  else if (key == "checkpoint_interval") cfg.checkpoint_interval = parse_int(value, key);
  else if (key == "cap_fraction") cfg.cap_fraction = parse_double(value, key);
  else if (key == "adam.beta1") cfg.adam.beta1 = parse_double(value, key);
  else if (key == "adam.beta2") cfg.adam.beta2 = parse_double(value, key);
  else if (key == "adam.eps") cfg.adam.eps = parse_double(value, key);
  else if (key == "adam.weight_decay") cfg.adam.weight_decay = parse_double(value, key);
  else if (key == "model.depth") m.depth = static_cast<int>(parse_int(value, key));
  else if (key == "model.channels") m.channels = static_cast<int>(parse_int(value, key));
  else if (key == "model.heads") m.heads = static_cast<int>(parse_int(value, key));
  else if (key == "model.grid_f") m.grid_f = static_cast<int>(parse_int(value, key));
  else if (key == "model.grid_h") m.grid_h = static_cast<int>(parse_int(value, key));
  else if (key == "model.grid_w") m.grid_w = static_cast<int>(parse_int(value, key));
  else if (key == "model.r_f") m.r_f = static_cast<int>(parse_int(value, key));
  else if (key == "model.r_s") m.r_s = static_cast<int>(parse_int(value, key));
  else if (key == "model.text_dim") m.text_dim = static_cast<int>(parse_int(value, key));
  else if (key == "model.vocab") m.vocab = static_cast<int>(parse_int(value, key));
  else if (key == "model.pb_indices") m.pb_indices = parse_int_list(value, key);
  else if (key == "model.e_s") m.e_s = static_cast<int>(parse_int(value, key));
  else if (key == "model.e_r") m.e_r = static_cast<int>(parse_int(value, key));
  else if (key == "model.top_k") m.top_k = static_cast<int>(parse_int(value, key));
  else if (key == "model.e_attn") m.e_attn = static_cast<int>(parse_int(value, key));
  else if (key == "model.categories") m.categories = static_cast<int>(parse_int(value, key));
  else if (key == "model.train_backbone") m.train_backbone = parse_int(value, key) != 0;
  else throw Error("trainer: unknown config key '" + key + "'");
}

}  // namespace

Schedule schedule_from_name(const std::string& name) {
  if (name == "constant") return Schedule::constant;
  if (name == "cosine_with_restarts") return Schedule::cosine_with_restarts;
  throw Error("trainer: unknown schedule '" + name + "'");
}

std::string schedule_name(Schedule s) {
  return s == Schedule::constant ? "constant" : "cosine_with_restarts";
}

void TrainConfig::validate() const {
  require(steps >= 0, "trainer: steps must be nonnegative");
  require(batch >= 2, "trainer: batch must be at least 2");
  require(lr > 0.0, "trainer: lr must be positive");
  require(restarts >= 0, "trainer: restarts must be nonnegative");
  require(cfg_dropout >= 0.0 && cfg_dropout <= 1.0, "trainer: cfg_dropout must lie in [0, 1]");
  require(weights.lambda1 >= 0.0 && weights.lambda2 >= 0.0 && weights.lambda3 >= 0.0,
          "trainer: loss weights must be nonnegative");
  require(checkpoint_interval > 0, "trainer: checkpoint_interval must be positive");
  require(cap_fraction > 0.0 && cap_fraction <= 1.0, "trainer: cap_fraction must lie in (0, 1]");
  model.validate();
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto eq = line.find('=');
    require(eq != std::string::npos,
            "trainer: config line " + std::to_string(lineno) + " is not 'key = value'");
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    require(!key.empty() && !value.empty(),
            "trainer: config line " + std::to_string(lineno) + " missing key or value");
    apply_key(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in.good()) throw Error("trainer: cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_text(const TrainConfig& cfg) {
  std::ostringstream out;
  out << "steps = " << cfg.steps << "\n";
  out << "batch = " << cfg.batch << "\n";
  out << "lr = " << fmt_double(cfg.lr) << "\n";
  out << "schedule = " << schedule_name(cfg.schedule) << "\n";
  out << "restarts = " << cfg.restarts << "\n";
  out << "cfg_dropout = " << fmt_double(cfg.cfg_dropout) << "\n";
  out << "lambda1 = " << fmt_double(cfg.weights.lambda1) << "\n";
  out << "lambda2 = " << fmt_double(cfg.weights.lambda2) << "\n";
  out << "lambda3 = " << fmt_double(cfg.weights.lambda3) << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "checkpoint_interval = " << cfg.checkpoint_interval << "\n";
  out << "cap_fraction = " << fmt_double(cfg.cap_fraction) << "\n";
  out << "adam.beta1 = " << fmt_double(cfg.adam.beta1) << "\n";
  out << "adam.beta2 = " << fmt_double(cfg.adam.beta2) << "\n";
  out << "adam.eps = " << fmt_double(cfg.adam.eps) << "\n";
  out << "adam.weight_decay = " << fmt_double(cfg.adam.weight_decay) << "\n";
  const model::BackboneConfig& m = cfg.model;
  out << "model.depth = " << m.depth << "\n";
  out << "model.channels = " << m.channels << "\n";
  out << "model.heads = " << m.heads << "\n";
  out << "model.grid_f = " << m.grid_f << "\n";
  out << "model.grid_h = " << m.grid_h << "\n";
  out << "model.grid_w = " << m.grid_w << "\n";
  out << "model.r_f = " << m.r_f << "\n";
  out << "model.r_s = " << m.r_s << "\n";
  out << "model.text_dim = " << m.text_dim << "\n";
  out << "model.vocab = " << m.vocab << "\n";
  out << "model.pb_indices = " << int_list_csv(m.pb_indices) << "\n";
  out << "model.e_s = " << m.e_s << "\n";
  out << "model.e_r = " << m.e_r << "\n";
  out << "model.top_k = " << m.top_k << "\n";
  out << "model.e_attn = " << m.e_attn << "\n";
  out << "model.categories = " << m.categories << "\n";
  out << "model.train_backbone = " << (m.train_backbone ? 1 : 0) << "\n";
  return out.str();
}

std::vector<TrainSample> prepare_corpus(const std::vector<synth::SyntheticSample>& samples,
                                        const model::BackboneConfig& mc, double cap_fraction) {
  require(!samples.empty(), "trainer: corpus is empty");
  std::vector<TrainSample> out;
  out.reserve(samples.size());
  for (const synth::SyntheticSample& s : samples) {
    require(s.latent.dim(0) == mc.tokens() && s.latent.dim(1) == mc.channels,
            "trainer: corpus latent shape " + shape_str(s.latent.shape()) +
                " does not match the model grid");
    require(s.q_s.q_s.numel() == mc.categories,
            "trainer: corpus q_s dimension does not match model.categories");
    auto [target, mask] = annot::synthetic_oracle_targets(s, cap_fraction);
    require(target.q_r.dim(1) == mc.e_attn,
            "trainer: corpus attribute count does not match model.e_attn");
    TrainSample t;
    t.latent = s.latent;
    t.q_s = s.q_s.q_s;
    t.caption = s.caption;
    t.q_r = std::move(target.q_r);
    t.mask = std::move(mask.m);
    out.push_back(std::move(t));
  }
  return out;
}

std::string StepMetrics::jsonl() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "{\"step\":" << step << ",\"flow\":" << flow << ",\"coarse\":" << coarse
      << ",\"fine\":" << fine << ",\"balance\":" << balance << ",\"total\":" << total
      << ",\"lr\":" << lr << ",\"entropy\":" << entropy << ",\"kept\":" << kept << "}";
  return out.str();
}

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  model::Denoiser m = model::Denoiser::init(cfg.model, derive_seed(cfg.seed, "model"));
  TrainState state(std::move(m), StreamSet(derive_seed(cfg.seed, "train")));
  for (const std::string& name : state.model.params().trainable_names()) {
    const Tensor& p = state.model.params().value(name);
    state.adam_m.emplace(name, Tensor(p.shape()));
    state.adam_v.emplace(name, Tensor(p.shape()));
  }
  return state;
}

double schedule_lr(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.schedule == Schedule::constant) return cfg.lr;
  require(cfg.steps > 0, "trainer: cosine schedule needs steps > 0");
  std::int64_t cycles = cfg.restarts + 1;
  std::int64_t seg = (cfg.steps + cycles - 1) / cycles;
  std::int64_t pos = step % seg;
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(pos) / static_cast<double>(seg)));
}

void adamw_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, std::int64_t t, double lr,
                  const AdamConfig& cfg) {
  require_same_shape(p, g, "trainer: adamw p/g");
  require_same_shape(p, m, "trainer: adamw p/m");
  require_same_shape(p, v, "trainer: adamw p/v");
  require(t >= 1, "trainer: adamw step must be 1-based");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
  }
}

StepMetrics train_step(TrainState& state, const TrainConfig& cfg,
                       const std::vector<TrainSample>& corpus) {
  cfg.validate();
  require(!corpus.empty(), "trainer: corpus is empty");
  const model::BackboneConfig& mc = cfg.model;
  const std::int64_t n = mc.tokens(), c = mc.channels;
  const int b = cfg.batch;

  std::vector<std::int64_t> idx(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i)
    idx[static_cast<std::size_t>(i)] =
        state.streams.data_order.uniform_int(static_cast<std::int64_t>(corpus.size()));
  std::vector<double> ts(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i)
    ts[static_cast<std::size_t>(i)] = state.streams.timestep.uniform(0.001, 0.999);
  Tensor noise({b * n, c});
  state.streams.noise.fill_normal(noise);
  std::vector<std::uint8_t> dropped(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i)
    dropped[static_cast<std::size_t>(i)] =
        state.streams.dropout.uniform() < cfg.cfg_dropout ? 1 : 0;

  model::BatchInput batch;
  batch.x_t = Tensor({b * n, c});
  batch.t = ts;
  batch.use_null = dropped;
  Tensor target({b * n, c});
  Tensor fine_q({b * n, static_cast<std::int64_t>(mc.e_attn)});
  Tensor fine_m(fine_q.shape());
  for (int i = 0; i < b; ++i) {
    const TrainSample& s = corpus[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    batch.captions.push_back(s.caption);
    const double t = ts[static_cast<std::size_t>(i)];
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t j = 0; j < c; ++j) {
        const double x0 = s.latent.at(r, j), nz = noise.at(i * n + r, j);
        batch.x_t.at(i * n + r, j) = (1.0 - t) * nz + t * x0;
        target.at(i * n + r, j) = x0 - nz;
      }
    for (std::int64_t r = 0; r < n; ++r)
      for (int e = 0; e < mc.e_attn; ++e) {
        fine_q.at(i * n + r, e) = s.q_r.at(r, e);
        fine_m.at(i * n + r, e) = s.mask.at(r, e);
      }
  }

  ad::Tape tp;
  model::ForwardHandles h = state.model.build(tp, batch);

  ad::Val diff = tp.sub(h.velocity, tp.input(target));
  ad::Val flow_v = tp.mean(tp.mul(diff, diff));

  std::vector<int> kept_rows;
  for (int i = 0; i < b; ++i)
    if (!dropped[static_cast<std::size_t>(i)]) kept_rows.push_back(i);
  ad::Val coarse_v;
  if (kept_rows.size() >= 2) {
    const std::int64_t k = static_cast<std::int64_t>(kept_rows.size());
    Tensor sel({k, static_cast<std::int64_t>(b)});
    Tensor q_rows({k, static_cast<std::int64_t>(mc.categories)});
    for (std::int64_t r = 0; r < k; ++r) {
      const int row = kept_rows[static_cast<std::size_t>(r)];
      sel.at(r, row) = 1.0;
      const TrainSample& s =
          corpus[static_cast<std::size_t>(idx[static_cast<std::size_t>(row)])];
      for (int cc = 0; cc < mc.categories; ++cc) q_rows.at(r, cc) = s.q_s[cc];
    }
    ad::Val kept_cat = tp.matmul(tp.input(std::move(sel)), h.cat_vec);
    losses::PairwiseMatrix q = losses::pairwise_cosine_matrix(q_rows);
    coarse_v = tp.coarse_cosine(kept_cat, std::move(q.p));
  } else {
    coarse_v = tp.input(Tensor::scalar(0.0));
  }

  ad::Val fine_diff = tp.sub(h.attr_map, tp.input(std::move(fine_q)));
  ad::Val fine_v = tp.dot_const(tp.mul(fine_diff, fine_diff), std::move(fine_m));

  Tensor freq({static_cast<std::int64_t>(mc.e_r)});
  for (std::int32_t e : h.expert_slots) freq[e] += 1.0;
  const double assignments = static_cast<double>(h.expert_slots.size());
  double entropy = 0.0;
  for (int e = 0; e < mc.e_r; ++e) {
    freq[e] /= assignments;
    if (freq[e] > 0.0) entropy -= freq[e] * std::log(freq[e]);
  }
  ad::Val balance_v =
      tp.scale(tp.dot_const(tp.col_mean(h.rho_r), freq), static_cast<double>(mc.e_r));

  ad::Val total_v = tp.add(
      flow_v, tp.add(tp.scale(coarse_v, cfg.weights.lambda1),
                     tp.add(tp.scale(fine_v, cfg.weights.lambda2),
                            tp.scale(balance_v, cfg.weights.lambda3))));

  StepMetrics metrics;
  metrics.step = state.step;
  metrics.flow = tp.value(flow_v)[0];
  metrics.coarse = tp.value(coarse_v)[0];
  metrics.fine = tp.value(fine_v)[0];
  metrics.balance = tp.value(balance_v)[0];
  metrics.total = tp.value(total_v)[0];
  metrics.lr = schedule_lr(cfg, state.step);
  metrics.entropy = entropy;
  metrics.kept = static_cast<int>(kept_rows.size());
  if (!std::isfinite(metrics.total))
    throw Error("trainer: non-finite loss at step " + std::to_string(state.step) +
                " (flow=" + fmt_double(metrics.flow) + " coarse=" + fmt_double(metrics.coarse) +
                " fine=" + fmt_double(metrics.fine) + " balance=" + fmt_double(metrics.balance) +
                " lr=" + fmt_double(metrics.lr) + ")");

  tp.backward(total_v);
  for (const std::string& name : state.model.params().trainable_names()) {
    const Tensor& g = tp.grad(h.leaves.at(name));
    adamw_update(state.model.params().value(name), g, state.adam_m.at(name),
                 state.adam_v.at(name), state.step + 1, metrics.lr, cfg.adam);
  }
  ++state.step;
  return metrics;
}

void run_training(TrainState& state, const TrainConfig& cfg,
                  const std::vector<TrainSample>& corpus, const std::filesystem::path& out_dir,
                  std::vector<StepMetrics>* log) {
  cfg.validate();
  require(!corpus.empty(), "trainer: corpus is empty");
  const bool write = !out_dir.empty();
  std::ofstream metrics_out;
  if (write) {
    std::filesystem::create_directories(out_dir);
    metrics_out.open(out_dir / "metrics.jsonl", std::ios::app);
    require(metrics_out.good(), "trainer: cannot write metrics log in " + out_dir.string());
  }
  while (state.step < cfg.steps) {
    StepMetrics m = train_step(state, cfg, corpus);
    if (log) log->push_back(m);
    if (write) {
      metrics_out << m.jsonl() << "\n";
      require(metrics_out.good(), "trainer: metrics log write failed");
      if (state.step % cfg.checkpoint_interval == 0 || state.step == cfg.steps) {
        std::ostringstream name;
        name << "checkpoint_" << std::setw(6) << std::setfill('0') << state.step;
        save_checkpoint(state, cfg, out_dir / name.str());
      }
    }
  }
}

TrainState run_training(const TrainConfig& cfg, const std::vector<TrainSample>& corpus,
                        const std::filesystem::path& out_dir, std::vector<StepMetrics>* log) {
  TrainState state = init_state(cfg);
  run_training(state, cfg, corpus, out_dir, log);
  return state;
}

void save_checkpoint(const TrainState& state, const TrainConfig& cfg,
                     const std::filesystem::path& dir) {
  io::Container c;
  c.set_meta("format", "prophy-checkpoint");
  c.set_meta("version", "1");
  c.set_meta("step", std::to_string(state.step));
  c.set_meta("config", [&] {
    // Embedded config keeps its newlines out of the manifest line format.
    std::string text = config_text(cfg);
    for (char& ch : text)
      if (ch == '\n') ch = ';';
    return text;
  }());
  c.set_meta("rng.data_order", state.streams.data_order.save_state());
  c.set_meta("rng.timestep", state.streams.timestep.save_state());
  c.set_meta("rng.noise", state.streams.noise.save_state());
  c.set_meta("rng.dropout", state.streams.dropout.save_state());
  for (const std::string& name : state.model.params().names())
    c.add("param." + name, state.model.params().value(name), io::DType::f64);
  for (const auto& [name, m] : state.adam_m) c.add("adam_m." + name, m, io::DType::f64);
  for (const auto& [name, v] : state.adam_v) c.add("adam_v." + name, v, io::DType::f64);
  c.save(dir);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  io::Container c = io::Container::load(dir);
  require(c.meta("format") == "prophy-checkpoint",
          "trainer: " + dir.string() + " is not a checkpoint");
  require(c.meta("version") == "1", "trainer: unsupported checkpoint version");
  std::string text = c.meta("config");
  for (char& ch : text)
    if (ch == ';') ch = '\n';
  TrainConfig cfg = parse_config(text);

  TrainState state = init_state(cfg);
  state.step = parse_int(c.meta("step"), "step");
  require(state.step >= 0, "trainer: negative step in checkpoint");
  state.streams.data_order.load_state(c.meta("rng.data_order"));
  state.streams.timestep.load_state(c.meta("rng.timestep"));
  state.streams.noise.load_state(c.meta("rng.noise"));
  state.streams.dropout.load_state(c.meta("rng.dropout"));
  for (const std::string& name : state.model.params().names()) {
    Tensor t = c.tensor("param." + name);
    require(t.shape() == state.model.params().value(name).shape(),
            "trainer: checkpoint shape mismatch for " + name);
    state.model.params().value(name) = std::move(t);
  }
  for (auto& [name, m] : state.adam_m) {
    Tensor t = c.tensor("adam_m." + name);
    require(t.shape() == m.shape(), "trainer: checkpoint shape mismatch for adam_m." + name);
    m = std::move(t);
  }
  for (auto& [name, v] : state.adam_v) {
    Tensor t = c.tensor("adam_v." + name);
    require(t.shape() == v.shape(), "trainer: checkpoint shape mismatch for adam_v." + name);
    v = std::move(t);
  }
  return Checkpoint{std::move(cfg), std::move(state)};
}

}  // namespace prophy::train
