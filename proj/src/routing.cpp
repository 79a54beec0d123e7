// SPDX-License-Identifier: Apache-2.0
#include "prophy/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prophy/linalg.hpp"

namespace prophy::routing {

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw Error(std::string(where) + ": non-finite input");
}

}  // namespace

LatentVideo LatentVideo::create(Tensor x, int frames, int height, int width, int r_f, int r_s) {
  require(x.ndim() == 2, "latent video: X must be [N, C]");
  require(r_f > 0 && r_s > 0, "latent video: downsampling ratios must be positive");
  require(frames % r_f == 0, "latent video: frames not divisible by r_f");
  require(height % r_s == 0 && width % r_s == 0,
          "latent video: spatial dims not divisible by r_s");
  const std::int64_t n =
      static_cast<std::int64_t>(frames / r_f) * (height / r_s) * (width / r_s);
  require(x.dim(0) == n, "latent video: X has " + std::to_string(x.dim(0)) +
                             " tokens, grid implies " + std::to_string(n));
  return LatentVideo{std::move(x), frames, height, width, r_f, r_s};
}

void validate_distribution(const Tensor& rho, double tol) {
  double sum = 0.0;
  for (std::int64_t i = 0; i < rho.numel(); ++i) {
    require(rho[i] >= 0.0, "routing: negative routing weight");
    sum += rho[i];
  }
  require(std::abs(sum - 1.0) <= tol, "routing: weights sum to " + std::to_string(sum));
}

Tensor softmax(const Tensor& logits) {
  require_finite(logits, "routing: softmax");
  Tensor out(logits.shape());
  double mx = logits[0];
  for (std::int64_t i = 1; i < logits.numel(); ++i) mx = std::max(mx, logits[i]);
  double z = 0.0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) z += (out[i] = std::exp(logits[i] - mx));
  for (std::int64_t i = 0; i < logits.numel(); ++i) out[i] /= z;
  return out;
}

Tensor semantic_route(const Tensor& y, const SemanticRouterParams& params) {
  require_finite(y, "semantic_route");
  require(y.numel() == params.text_dim(),
          "semantic_route: y has dim " + std::to_string(y.numel()) + ", router expects " +
              std::to_string(params.text_dim()));
  const std::int64_t hidden = params.w1.dim(0), experts = params.w2.dim(0);
  Tensor h({hidden});
  for (std::int64_t i = 0; i < hidden; ++i) {
    double acc = params.b1[i];
    for (std::int64_t j = 0; j < y.numel(); ++j) acc += params.w1.at(i, j) * y[j];
    h[i] = gelu(acc);
  }
  Tensor logits({experts});
  for (std::int64_t i = 0; i < experts; ++i) {
    double acc = params.b2[i];
    for (std::int64_t j = 0; j < hidden; ++j) acc += params.w2.at(i, j) * h[j];
    logits[i] = acc;
  }
  return softmax(logits);
}

LatentVideo apply_seb(const LatentVideo& x, const Tensor& rho_p, const PhysicalBasisMaps& basis) {
  require(basis.b.ndim() == 3, "apply_seb: basis maps must be [E_s, N, C]");
  require(rho_p.numel() == basis.experts(), "apply_seb: rho_p length does not match basis count");
  require(basis.b.dim(1) == x.tokens() && basis.b.dim(2) == x.channels(),
          "apply_seb: basis map shape " + shape_str(basis.b.shape()) +
              " does not match latent " + shape_str(x.x.shape()));
  LatentVideo out = x;
  const std::int64_t per_map = x.tokens() * x.channels();
  for (std::int64_t e = 0; e < basis.experts(); ++e) {
    const double w = rho_p[e];
    const double* be = basis.b.data() + e * per_map;
    for (std::int64_t i = 0; i < per_map; ++i) out.x[i] += w * be[i];
  }
  return out;
}

Tensor refinement_route(const Tensor& x, const RefinementRouterParams& params) {
  require_finite(x, "refinement_route");
  require(x.numel() == params.w.dim(1), "refinement_route: token dim " +
                                            std::to_string(x.numel()) + " vs router fan-in " +
                                            std::to_string(params.w.dim(1)));
  const std::int64_t experts = params.experts();
  Tensor logits({experts});
  for (std::int64_t i = 0; i < experts; ++i) {
    double acc = params.b[i];
    for (std::int64_t j = 0; j < x.numel(); ++j) acc += params.w.at(i, j) * x[j];
    logits[i] = acc;
  }
  return softmax(logits);
}

TopK select_topk(const Tensor& rho, int k) {
  const std::int64_t e = rho.numel();
  require(k >= 1, "select_topk: k must be at least 1");
  require(k <= e, "select_topk: k = " + std::to_string(k) + " exceeds " + std::to_string(e) +
                      " experts");
  std::vector<int> order(static_cast<std::size_t>(e));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return rho[a] > rho[b]; });
  TopK out;
  out.indices.assign(order.begin(), order.begin() + k);
  double sum = 0.0;
  for (int idx : out.indices) sum += rho[idx];
  require(sum > 0.0, "select_topk: selected weights sum to zero");
  out.weights.reserve(static_cast<std::size_t>(k));
  for (int idx : out.indices) out.weights.push_back(rho[idx] / sum);
  return out;
}

LatentVideo apply_reb(const LatentVideo& x, const RefinementRouterParams& router,
                      const RefinementExperts& experts, bool renormalize) {
  const std::int64_t n = x.tokens(), c = x.channels();
  require(router.w.dim(1) == c, "apply_reb: router fan-in does not match channels");
  require(experts.channels() == c, "apply_reb: expert width does not match channels");
  require(experts.experts() == router.experts(),
          "apply_reb: expert count does not match router output");
  require(router.top_k >= 1 && router.top_k <= router.experts(),
          "apply_reb: top_k out of range");
  LatentVideo out = x;
  Tensor token({c});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < c; ++j) token[j] = x.x.at(i, j);
    const Tensor rho = refinement_route(token, router);
    const TopK sel = select_topk(rho, router.top_k);
    for (std::int64_t j = 0; j < c; ++j) out.x.at(i, j) = 0.0;
    for (std::size_t a = 0; a < sel.indices.size(); ++a) {
      const int e = sel.indices[a];
      const double w = renormalize ? sel.weights[a] : rho[e];
      for (std::int64_t o = 0; o < c; ++o) {
        double acc = experts.b.at(e, o);
        for (std::int64_t j = 0; j < c; ++j) acc += experts.w.at(e, o, j) * token[j];
        out.x.at(i, o) += w * acc;
      }
    }
  }
  return out;
}

Tensor project_routing(const Tensor& rho_r_rows, const ProjectionHead& head) {
  require(rho_r_rows.ndim() == 2, "project_routing: expected [N, E_r] rows");
  require(rho_r_rows.dim(1) == head.w.dim(1),
          "project_routing: rows have dim " + std::to_string(rho_r_rows.dim(1)) +
              ", head expects " + std::to_string(head.w.dim(1)));
  return linalg::affine(rho_r_rows, head.w, head.b);
}

SemanticRouterParams init_semantic_router(int text_dim, int experts, int hidden, Rng& rng) {
  require(text_dim > 0 && experts > 0 && hidden > 0, "init_semantic_router: bad dims");
  SemanticRouterParams p;
  p.w1 = Tensor({hidden, text_dim});
  rng.fill_normal(p.w1, 0.0, 1.0 / std::sqrt(static_cast<double>(text_dim)));
  p.b1 = Tensor({hidden});
  p.w2 = Tensor({experts, hidden});
  rng.fill_normal(p.w2, 0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.b2 = Tensor({experts});
  return p;
}

RefinementRouterParams init_refinement_router(int channels, int experts, int top_k, Rng& rng) {
  require(top_k >= 1 && top_k <= experts, "init_refinement_router: top_k out of range");
  RefinementRouterParams p;
  p.w = Tensor({experts, channels});
  // Soft start: near-uniform routing keeps gradients flowing to every expert
  // while per-token structure forms; confident routing is learned, not seeded.
  rng.fill_normal(p.w, 0.0, 0.2 / std::sqrt(static_cast<double>(channels)));
  p.b = Tensor({experts});
  p.top_k = top_k;
  return p;
}

RefinementExperts init_refinement_experts(int experts, int channels, Rng& rng, double noise) {
  RefinementExperts e;
  e.w = Tensor({experts, channels, channels});
  rng.fill_normal(e.w, 0.0, noise);
  for (std::int64_t ex = 0; ex < experts; ++ex)
    for (std::int64_t i = 0; i < channels; ++i) e.w.at(ex, i, i) += 1.0;
  e.b = Tensor({experts, channels});
  return e;
}

PhysicalBasisMaps init_basis_maps(int experts, std::int64_t tokens, std::int64_t channels,
                                  Rng& rng, double stddev) {
  require(experts >= 1, "init_basis_maps: need at least one expert");
  PhysicalBasisMaps b;
  b.b = Tensor({experts, tokens, channels});
  rng.fill_normal(b.b, 0.0, stddev);
  return b;
}

ProjectionHead init_projection_head(int experts, int out_dim, Rng& rng) {
  ProjectionHead h;
  h.w = Tensor({out_dim, experts});
  rng.fill_normal(h.w, 0.0, 1.0 / std::sqrt(static_cast<double>(experts)));
  h.b = Tensor({out_dim});
  return h;
}

}  // namespace prophy::routing
