// SPDX-License-Identifier: Apache-2.0
#include "prophy/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "prophy/routing.hpp"

namespace prophy::model {

using ad::Tape;
using ad::Val;

void BackboneConfig::validate() const {
  require(depth > 0, "backbone: depth must be positive");
  require(channels > 0 && heads > 0, "backbone: channels and heads must be positive");
  require(channels % heads == 0, "backbone: heads must divide channels");
  require(channels % 2 == 0, "backbone: channels must be even for time features");
  require(grid_f > 0 && grid_h > 0 && grid_w > 0, "backbone: bad token grid");
  require(r_f > 0 && r_s > 0, "backbone: bad patch strides");
  require(text_dim > 0 && vocab > 0, "backbone: bad text dims");
  require(!pb_indices.empty(), "backbone: at least one PB attachment is required");
  for (std::size_t j = 0; j < pb_indices.size(); ++j) {
    require(pb_indices[j] >= 0 && pb_indices[j] < depth, "backbone: pb index out of range");
    if (j > 0)
      require(pb_indices[j] > pb_indices[j - 1], "backbone: pb indices must strictly increase");
  }
  require(e_s > 0 && e_r > 0, "backbone: expert counts must be positive");
  require(top_k > 0 && top_k <= e_r, "backbone: top_k must be in [1, E_r]");
  require(e_attn > 0 && categories > 0, "backbone: head dims must be positive");
}

void ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  require(!name.empty(), "params: empty name");
  require(values_.count(name) == 0, "params: duplicate name '" + name + "'");
  order_.push_back(name);
  values_.emplace(name, std::move(value));
  trainable_[name] = trainable;
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = values_.find(name);
  require(it != values_.end(), "params: unknown name '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = values_.find(name);
  require(it != values_.end(), "params: unknown name '" + name + "'");
  return it->second;
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = trainable_.find(name);
  require(it != trainable_.end(), "params: unknown name '" + name + "'");
  return it->second;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  auto it = trainable_.find(name);
  require(it != trainable_.end(), "params: unknown name '" + name + "'");
  it->second = trainable;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& name : order_)
    if (trainable_.at(name)) out.push_back(name);
  return out;
}

Tensor time_features(double t, int dim) {
  require(dim > 0 && dim % 2 == 0, "backbone: time feature dim must be even");
  require(std::isfinite(t), "backbone: non-finite time");
  Tensor out({dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    double angle = 1000.0 * t * freq;
    out[2 * i] = std::sin(angle);
    out[2 * i + 1] = std::cos(angle);
  }
  return out;
}

namespace {

const char* kBlockSuffixes[] = {"ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
                                "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b",
                                "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"};

Tensor fan_in_weight(std::int64_t out, std::int64_t in, Rng& rng) {
  Tensor w({out, in});
  rng.fill_normal(w, 0.0, 1.0 / std::sqrt(static_cast<double>(in)));
  return w;
}

Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor ones(std::int64_t n) {
  Tensor t({n});
  t.fill(1.0);
  return t;
}

void add_block(ParamStore& store, const std::string& prefix, const BackboneConfig& cfg,
               Rng& rng, bool trainable) {
  std::int64_t c = cfg.channels;
  store.add(prefix + ".ln1.g", ones(c), trainable);
  store.add(prefix + ".ln1.b", zeros({c}), trainable);
  for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
    store.add(prefix + "." + w, fan_in_weight(c, c, rng), trainable);
  for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
    store.add(prefix + "." + b, zeros({c}), trainable);
  store.add(prefix + ".ln2.g", ones(c), trainable);
  store.add(prefix + ".ln2.b", zeros({c}), trainable);
  store.add(prefix + ".mlp.w1", fan_in_weight(4 * c, c, rng), trainable);
  store.add(prefix + ".mlp.b1", zeros({4 * c}), trainable);
  store.add(prefix + ".mlp.w2", fan_in_weight(c, 4 * c, rng), trainable);
  store.add(prefix + ".mlp.b2", zeros({c}), trainable);
}

struct BlockVals {
  Val ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2;
};

BlockVals mount_block(const std::map<std::string, Val>& leaves, const std::string& prefix) {
  auto get = [&](const char* suffix) { return leaves.at(prefix + "." + suffix); };
  BlockVals b;
  b.ln1g = get("ln1.g");
  b.ln1b = get("ln1.b");
  b.wq = get("attn.wq");
  b.bq = get("attn.bq");
  b.wk = get("attn.wk");
  b.bk = get("attn.bk");
  b.wv = get("attn.wv");
  b.bv = get("attn.bv");
  b.wo = get("attn.wo");
  b.bo = get("attn.bo");
  b.ln2g = get("ln2.g");
  b.ln2b = get("ln2.b");
  b.w1 = get("mlp.w1");
  b.b1 = get("mlp.b1");
  b.w2 = get("mlp.w2");
  b.b2 = get("mlp.b2");
  return b;
}

Val block_forward(Tape& tp, Val x, const BlockVals& p, std::int64_t batch, std::int64_t heads) {
  Val n1 = tp.layer_norm(x, p.ln1g, p.ln1b);
  Val att = tp.attention(tp.linear(n1, p.wq, p.bq), tp.linear(n1, p.wk, p.bk),
                         tp.linear(n1, p.wv, p.bv), batch, heads);
  Val h = tp.add(x, tp.linear(att, p.wo, p.bo));
  Val n2 = tp.layer_norm(h, p.ln2g, p.ln2b);
  Val m = tp.linear(tp.gelu(tp.linear(n2, p.w1, p.b1)), p.w2, p.b2);
  return tp.add(h, m);
}

Tensor onehot_mean(const std::vector<int>& caption, int vocab) {
  require(!caption.empty(), "backbone: empty caption");
  Tensor row({vocab});
  for (int tok : caption) {
    require(tok >= 0 && tok < vocab, "backbone: caption token out of range");
    row[tok] += 1.0 / static_cast<double>(caption.size());
  }
  return row;
}

}  // namespace

void init_backbone_params(ParamStore& store, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  bool tr = cfg.train_backbone;
  std::int64_t c = cfg.channels, d = cfg.text_dim;
  store.add("backbone.pos", [&] {
    Tensor p({cfg.tokens(), c});
    rng.fill_normal(p, 0.0, 0.02);
    return p;
  }(), tr);
  store.add("backbone.time.w1", fan_in_weight(c, c, rng), tr);
  store.add("backbone.time.b1", zeros({c}), tr);
  store.add("backbone.time.w2", fan_in_weight(c, c, rng), tr);
  store.add("backbone.time.b2", zeros({c}), tr);
  store.add("backbone.text.embed", [&] {
    Tensor e({cfg.vocab, d});
    rng.fill_normal(e);
    return e;
  }(), tr);
  store.add("backbone.text.proj.w", fan_in_weight(c, d, rng), tr);
  store.add("backbone.text.proj.b", zeros({c}), tr);
  store.add("backbone.text.null", [&] {
    Tensor n({d});
    rng.fill_normal(n);
    return n;
  }(), tr);
  for (int i = 0; i < cfg.depth; ++i)
    add_block(store, "backbone.block" + std::to_string(i), cfg, rng, tr);
  store.add("backbone.final.g", ones(c), tr);
  store.add("backbone.final.b", zeros({c}), tr);
  store.add("backbone.head.w", fan_in_weight(c, c, rng), tr);
  store.add("backbone.head.b", zeros({c}), tr);
}

void init_physical_branch(ParamStore& store, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  std::int64_t c = cfg.channels;

  routing::PhysicalBasisMaps basis =
      routing::init_basis_maps(cfg.e_s, cfg.tokens(), c, rng);
  store.add("branch.seb.basis", basis.b, true);
  routing::SemanticRouterParams sem =
      routing::init_semantic_router(cfg.text_dim, cfg.e_s, cfg.sem_hidden(), rng);
  store.add("branch.seb.router.w1", sem.w1, true);
  store.add("branch.seb.router.b1", sem.b1, true);
  store.add("branch.seb.router.w2", sem.w2, true);
  store.add("branch.seb.router.b2", sem.b2, true);
  store.add("branch.seb.category.w", fan_in_weight(cfg.categories, cfg.e_s, rng), true);
  store.add("branch.seb.category.b", zeros({cfg.categories}), true);

  for (std::size_t j = 0; j < cfg.pb_indices.size(); ++j) {
    int idx = cfg.pb_indices[j];
    require(idx >= 0 && idx < cfg.depth, "backbone: pb index out of range");
    std::string src = "backbone.block" + std::to_string(idx);
    std::string dst = "branch.pb" + std::to_string(j);
    for (const char* suffix : kBlockSuffixes) {
      require(store.has(src + "." + suffix), "backbone: missing block array for PB copy");
      store.add(dst + "." + suffix, store.value(src + "." + suffix), true);
    }
    std::string inj = "branch.inject" + std::to_string(j);
    store.add(inj + ".w", zeros({c, c}), true);
    store.add(inj + ".b", zeros({c}), true);
  }

  routing::RefinementRouterParams router =
      routing::init_refinement_router(static_cast<int>(c), cfg.e_r, cfg.top_k, rng);
  store.add("branch.reb.router.w", router.w, true);
  store.add("branch.reb.router.b", router.b, true);
  routing::RefinementExperts experts =
      routing::init_refinement_experts(cfg.e_r, static_cast<int>(c), rng);
  store.add("branch.reb.experts.w", experts.w, true);
  store.add("branch.reb.experts.b", experts.b, true);
  routing::ProjectionHead head = routing::init_projection_head(cfg.e_r, cfg.e_attn, rng);
  store.add("branch.reb.attr.w", head.w, true);
  store.add("branch.reb.attr.b", head.b, true);
}

Denoiser::Denoiser(BackboneConfig config, ParamStore params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const char* required[] = {"backbone.pos",       "backbone.head.w",     "branch.seb.basis",
                            "branch.reb.router.w", "branch.reb.experts.w", "branch.inject0.w"};
  for (const char* name : required)
    require(params_.has(name), std::string("backbone: store is missing ") + name);
  require(params_.value("branch.seb.basis").dim(1) == config_.tokens(),
          "backbone: basis maps sized for a different token grid");
}

Denoiser Denoiser::init(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  ParamStore store;
  Rng rng_backbone(derive_seed(seed, "init.backbone"));
  init_backbone_params(store, config, rng_backbone);
  Rng rng_branch(derive_seed(seed, "init.branch"));
  init_physical_branch(store, config, rng_branch);
  return Denoiser(config, std::move(store));
}

ForwardHandles Denoiser::build(Tape& tp, const BatchInput& in) const {
  const BackboneConfig& cfg = config_;
  std::int64_t n = cfg.tokens(), c = cfg.channels;
  auto b = static_cast<std::int64_t>(in.t.size());
  require(b >= 1, "backbone: empty batch");
  require(in.captions.size() == in.t.size() && in.use_null.size() == in.t.size(),
          "backbone: batch field lengths disagree");
  require(in.x_t.ndim() == 2 && in.x_t.dim(0) == b * n && in.x_t.dim(1) == c,
          "backbone: x_t shape does not match config");
  require(in.x_t.all_finite(), "backbone: non-finite latent input");
  for (double t : in.t) require(std::isfinite(t), "backbone: non-finite time");

  ForwardHandles out;
  for (const auto& name : params_.names()) {
    const Tensor& v = params_.value(name);
    out.leaves[name] = params_.trainable(name) ? tp.param(v) : tp.input(v);
  }
  auto leaf = [&](const std::string& name) { return out.leaves.at(name); };

  // Conditioning: sinusoidal time MLP plus (possibly nulled) text embedding.
  Tensor tfeat({b, c});
  for (std::int64_t i = 0; i < b; ++i) {
    Tensor row = time_features(in.t[i], static_cast<int>(c));
    for (std::int64_t j = 0; j < c; ++j) tfeat.at(i, j) = row[j];
  }
  Val time_hidden = tp.gelu(tp.linear(tp.input(tfeat), leaf("backbone.time.w1"),
                                      leaf("backbone.time.b1")));
  Val time_cond = tp.linear(time_hidden, leaf("backbone.time.w2"), leaf("backbone.time.b2"));

  Tensor onehot({b, static_cast<std::int64_t>(cfg.vocab)});
  Tensor keep({b, static_cast<std::int64_t>(cfg.text_dim)});
  Tensor use({b, static_cast<std::int64_t>(cfg.text_dim)});
  for (std::int64_t i = 0; i < b; ++i) {
    Tensor row = onehot_mean(in.captions[i], cfg.vocab);
    for (int j = 0; j < cfg.vocab; ++j) onehot.at(i, j) = row[j];
    for (int j = 0; j < cfg.text_dim; ++j) {
      keep.at(i, j) = in.use_null[i] ? 0.0 : 1.0;
      use.at(i, j) = in.use_null[i] ? 1.0 : 0.0;
    }
  }
  Val y_caption = tp.matmul(tp.input(onehot), leaf("backbone.text.embed"));
  Val null_rows = tp.add_row_broadcast(
      tp.input(Tensor({b, static_cast<std::int64_t>(cfg.text_dim)})),
      tp.reshape(leaf("backbone.text.null"), {1, cfg.text_dim}), b);
  Val y = tp.add(tp.mul_const(y_caption, keep), tp.mul_const(null_rows, use));
  Val text_cond = tp.linear(y, leaf("backbone.text.proj.w"), leaf("backbone.text.proj.b"));
  Val cond = tp.add(time_cond, text_cond);

  // Token stream: latent + positional embedding + per-sample conditioning.
  Val x_rows = tp.reshape(tp.input(in.x_t), {b, n * c});
  Val with_pos = tp.add_row_broadcast(x_rows, tp.reshape(leaf("backbone.pos"), {1, n * c}), b);
  Val h = tp.add_row_broadcast(tp.reshape(with_pos, {b * n, c}), cond, n);

  // Semantic routing and SEB at the branch input.
  Val sem_hidden = tp.gelu(tp.linear(y, leaf("branch.seb.router.w1"),
                                     leaf("branch.seb.router.b1")));
  out.sem_logits = tp.linear(sem_hidden, leaf("branch.seb.router.w2"),
                             leaf("branch.seb.router.b2"));
  out.rho_p = tp.softmax_rows(out.sem_logits);
  out.cat_vec = tp.linear(out.rho_p, leaf("branch.seb.category.w"),
                          leaf("branch.seb.category.b"));
  Val basis_rows = tp.reshape(leaf("branch.seb.basis"), {cfg.e_s, n * c});
  Val seb_shift = tp.reshape(tp.matmul(out.rho_p, basis_rows), {b * n, c});
  Val branch = tp.add(h, seb_shift);

  std::size_t pb = 0;
  int last_pb = cfg.pb_indices.back();
  for (int i = 0; i < cfg.depth; ++i) {
    h = block_forward(tp, h, mount_block(out.leaves, "backbone.block" + std::to_string(i)), b,
                      cfg.heads);
    if (pb < cfg.pb_indices.size() && cfg.pb_indices[pb] == i) {
      branch = block_forward(tp, branch,
                             mount_block(out.leaves, "branch.pb" + std::to_string(pb)), b,
                             cfg.heads);
      if (i == last_pb) {
        Val logits = tp.linear(branch, leaf("branch.reb.router.w"), leaf("branch.reb.router.b"));
        if (in.invert_refinement) logits = tp.scale(logits, -1.0);
        out.rho_r = tp.softmax_rows(logits);
        out.attr_map = tp.linear(out.rho_r, leaf("branch.reb.attr.w"), leaf("branch.reb.attr.b"));
        Tape::MoeOut moe = tp.moe_apply(branch, out.rho_r, leaf("branch.reb.experts.w"),
                                        leaf("branch.reb.experts.b"), cfg.top_k, true);
        branch = moe.out;
        out.expert_slots = std::move(moe.indices);
      }
      std::string inj = "branch.inject" + std::to_string(pb);
      h = tp.add(h, tp.linear(branch, leaf(inj + ".w"), leaf(inj + ".b")));
      ++pb;
    }
  }

  Val hn = tp.layer_norm(h, leaf("backbone.final.g"), leaf("backbone.final.b"));
  out.velocity = tp.linear(hn, leaf("backbone.head.w"), leaf("backbone.head.b"));
  return out;
}

Tensor Denoiser::forward(const DenoiserInput& in) const {
  BatchInput batch;
  batch.x_t = in.x_t;
  batch.t = {in.t};
  batch.captions = {in.caption};
  batch.use_null = {static_cast<std::uint8_t>(in.cfg_null ? 1 : 0)};
  batch.invert_refinement = in.invert_refinement;
  Tape tp;
  ForwardHandles h = build(tp, batch);
  return tp.value(h.velocity);
}

double Denoiser::flow_loss(const Tensor& x0, const Tensor& noise, double t,
                           const std::vector<int>& caption, bool cfg_null) const {
  require(t > 0.0 && t < 1.0, "backbone: flow time must be in (0, 1)");
  require_same_shape(x0, noise, "flow_loss inputs");
  Tensor x_t(x0.shape());
  for (std::int64_t i = 0; i < x_t.numel(); ++i) x_t[i] = (1.0 - t) * noise[i] + t * x0[i];
  DenoiserInput in;
  in.x_t = std::move(x_t);
  in.t = t;
  in.caption = caption;
  in.cfg_null = cfg_null;
  Tensor v = forward(in);
  double acc = 0.0;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    double r = v[i] - (x0[i] - noise[i]);
    acc += r * r;
  }
  return acc / static_cast<double>(v.numel());
}

Tensor Denoiser::sample(const std::vector<int>& caption, int steps, std::uint64_t seed,
                        double guidance_scale, bool invert_refinement) const {
  require(steps >= 1, "backbone: sampler needs at least one step");
  require(std::isfinite(guidance_scale), "backbone: non-finite guidance scale");
  std::int64_t n = config_.tokens(), c = config_.channels;
  Tensor x({n, c});
  Rng rng(derive_seed(seed, "sample.init"));
  rng.fill_normal(x);
  double dt = 1.0 / steps;
  bool pure_conditional = guidance_scale == 1.0;
  for (int s = 0; s < steps; ++s) {
    double t = static_cast<double>(s) / steps;
    BatchInput batch;
    batch.invert_refinement = invert_refinement;
    if (pure_conditional) {
      batch.x_t = x;
      batch.t = {t};
      batch.captions = {caption};
      batch.use_null = {0};
    } else {
      batch.x_t = Tensor({2 * n, c});
      for (std::int64_t i = 0; i < n * c; ++i) {
        batch.x_t[i] = x[i];
        batch.x_t[n * c + i] = x[i];
      }
      batch.t = {t, t};
      batch.captions = {caption, caption};
      batch.use_null = {0, 1};
    }
    Tape tp;
    ForwardHandles h = build(tp, batch);
    const Tensor& v = tp.value(h.velocity);
    for (std::int64_t i = 0; i < n * c; ++i) {
      double vi = pure_conditional
                      ? v[i]
                      : v[n * c + i] + guidance_scale * (v[i] - v[n * c + i]);
      x[i] += dt * vi;
    }
    require(x.all_finite(),
            "backbone: non-finite state after sampler step " + std::to_string(s));
  }
  return x;
}

Tensor Denoiser::text_embedding(const std::vector<int>& caption, bool use_null) const {
  if (use_null) return params_.value("backbone.text.null");
  Tensor onehot = onehot_mean(caption, config_.vocab);
  const Tensor& embed = params_.value("backbone.text.embed");
  Tensor y({static_cast<std::int64_t>(config_.text_dim)});
  for (int j = 0; j < config_.text_dim; ++j) {
    double acc = 0.0;
    for (int v = 0; v < config_.vocab; ++v) acc += onehot[v] * embed.at(v, j);
    y[j] = acc;
  }
  return y;
}

}  // namespace prophy::model
