// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "prophy/rng.hpp"
#include "prophy/tensor.hpp"

namespace prophy::routing {

/// Token grid over a latent video clip: N tokens of C channels, where
/// N = (frames/r_f) * (height/r_s) * (width/r_s), all divisions exact.
struct LatentVideo {
  Tensor x;  // [N, C]
  int frames = 0;
  int height = 0;
  int width = 0;
  int r_f = 1;
  int r_s = 1;

  static LatentVideo create(Tensor x, int frames, int height, int width, int r_f, int r_s);
  std::int64_t tokens() const { return x.dim(0); }
  std::int64_t channels() const { return x.dim(1); }
  int grid_f() const { return frames / r_f; }
  int grid_h() const { return height / r_s; }
  int grid_w() const { return width / r_s; }
};

/// Learnable basis maps, one per semantic expert, each shaped like X.
struct PhysicalBasisMaps {
  Tensor b;  // [E_s, N, C]
  std::int64_t experts() const { return b.dim(0); }
};

/// Two-layer perceptron: text embedding [D_text] -> expert logits [E_s].
struct SemanticRouterParams {
  Tensor w1;  // [H_sem, D_text]
  Tensor b1;  // [H_sem]
  Tensor w2;  // [E_s, H_sem]
  Tensor b2;  // [E_s]
  std::int64_t experts() const { return w2.dim(0); }
  std::int64_t text_dim() const { return w1.dim(1); }
};

/// Affine map token [C] -> logits [E_r], plus the top-k count.
struct RefinementRouterParams {
  Tensor w;  // [E_r, C]
  Tensor b;  // [E_r]
  int top_k = 1;
  std::int64_t experts() const { return w.dim(0); }
};

/// E_r affine experts C -> C stored as one block each.
struct RefinementExperts {
  Tensor w;  // [E_r, C, C], rows are output channels
  Tensor b;  // [E_r, C]
  std::int64_t experts() const { return w.dim(0); }
  std::int64_t channels() const { return w.dim(1); }
};

/// Routing weight vectors for one sample / one token.
struct RoutingWeights {
  Tensor rho_p;  // [E_s]
  Tensor rho_r;  // [E_r]
};

/// Affine head expanding per-token routing weights [E_r] -> [E_attn].
struct ProjectionHead {
  Tensor w;  // [E_attn, E_r]
  Tensor b;  // [E_attn]
  std::int64_t out_dim() const { return w.dim(0); }
};

struct TopK {
  std::vector<int> indices;
  std::vector<double> weights;
};

/// Checks that rho is a distribution: nonnegative, sums to 1 within tol.
void validate_distribution(const Tensor& rho, double tol = 1e-12);

Tensor softmax(const Tensor& logits);

/// rho_p = softmax(mlp(y)).
Tensor semantic_route(const Tensor& y, const SemanticRouterParams& params);

/// X~ = X + sum_e rho_p[e] * B_e; continuous mixture over all experts.
LatentVideo apply_seb(const LatentVideo& x, const Tensor& rho_p, const PhysicalBasisMaps& basis);

/// rho_r = softmax(W x + b) for one token.
Tensor refinement_route(const Tensor& x, const RefinementRouterParams& params);

/// Indices of the k largest entries (ties toward the lower index) and the
/// selected weights renormalized to sum 1.
TopK select_topk(const Tensor& rho, int k);

/// Per-token top-k expert mixture. With renormalize=false the raw selected
/// probabilities are used as mixture weights.
LatentVideo apply_reb(const LatentVideo& x, const RefinementRouterParams& router,
                      const RefinementExperts& experts, bool renormalize = true);

/// Stacked per-token head outputs: rows [N, E_r] -> [N, E_attn].
Tensor project_routing(const Tensor& rho_r_rows, const ProjectionHead& head);

SemanticRouterParams init_semantic_router(int text_dim, int experts, int hidden, Rng& rng);
RefinementRouterParams init_refinement_router(int channels, int experts, int top_k, Rng& rng);
/// Experts start near the identity: W_e = I + noise, b_e = 0.
RefinementExperts init_refinement_experts(int experts, int channels, Rng& rng,
                                          double noise = 0.02);
PhysicalBasisMaps init_basis_maps(int experts, std::int64_t tokens, std::int64_t channels,
                                  Rng& rng, double stddev = 0.02);
ProjectionHead init_projection_head(int experts, int out_dim, Rng& rng);

}  // namespace prophy::routing
