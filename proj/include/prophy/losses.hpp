// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prophy/tensor.hpp"

namespace prophy::losses {

/// Symmetric cosine-similarity matrix over batch rows.
struct PairwiseMatrix {
  Tensor p;  // [B, B]
  std::int64_t batch() const { return p.dim(0); }
};

struct LossWeights {
  double lambda1 = 0.1;   // coarse semantic alignment
  double lambda2 = 0.02;  // fine-grained alignment
  double lambda3 = 0.01;  // load balance
};

/// P[i,j] = cos(v_i, v_j); rows with norm < eps get cosine 0 off-diagonal
/// and 1 on the diagonal.
PairwiseMatrix pairwise_cosine_matrix(const Tensor& v, double eps = 1e-12);

/// Strict-upper-triangle sum of squared residuals between the matrices.
double coarse_align_loss(const PairwiseMatrix& p_s, const PairwiseMatrix& q_s);

/// Sum over masked entries of squared residuals; mask entries must be 0 or 1.
double fine_align_loss(const Tensor& p_r, const Tensor& q_r, const Tensor& mask);

/// E_r * sum_e f_e * mean_prob_e, with f_e the fraction of top-k assignments
/// landing on expert e. `selected` holds k expert ids per token.
double load_balance_loss(const Tensor& router_probs,
                         const std::vector<std::vector<int>>& selected);

double total_loss(double diffusion, double coarse, double fine_align, double fine_balance,
                  const LossWeights& w);

/// One named parameter block for grad_check: `value` is perturbed in place
/// while loss_fn is re-evaluated; `analytic` is the caller's gradient.
struct GradParam {
  std::string name;
  Tensor* value = nullptr;
  const Tensor* analytic = nullptr;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t coords = 0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double step = 0.0;
  double tolerance = 0.0;
  double max_rel_err = 0.0;
  bool passed = false;
  /// Plain-text report table.
  std::string table() const;
};

/// Central-difference verification of analytic gradients. The relative error
/// per coordinate is |fd - analytic| / max(1, |fd|, |analytic|); an entry
/// passes iff its max over coordinates is <= tolerance.
GradCheckReport grad_check(const std::function<double()>& loss_fn,
                           const std::vector<GradParam>& params, double step = 1e-5,
                           double tolerance = 1e-4);

}  // namespace prophy::losses
