// SPDX-License-Identifier: Apache-2.0
#include "prophy/losses.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace prophy::losses {

PairwiseMatrix pairwise_cosine_matrix(const Tensor& v, double eps) {
  require(v.ndim() == 2, "pairwise_cosine_matrix: expected [B, D]");
  const std::int64_t b = v.dim(0), d = v.dim(1);
  require(b >= 2, "pairwise_cosine_matrix: needs at least 2 rows, got " + std::to_string(b));
  Tensor norms({b});
  for (std::int64_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::int64_t l = 0; l < d; ++l) s += v.at(i, l) * v.at(i, l);
    norms[i] = std::sqrt(s);
  }
  Tensor p({b, b});
  for (std::int64_t i = 0; i < b; ++i) {
    p.at(i, i) = 1.0;
    for (std::int64_t j = i + 1; j < b; ++j) {
      double c = 0.0;
      if (norms[i] >= eps && norms[j] >= eps) {
        double dot = 0.0;
        for (std::int64_t l = 0; l < d; ++l) dot += v.at(i, l) * v.at(j, l);
        c = dot / (norms[i] * norms[j]);
      }
      p.at(i, j) = c;
      p.at(j, i) = c;
    }
  }
  return PairwiseMatrix{std::move(p)};
}

double coarse_align_loss(const PairwiseMatrix& p_s, const PairwiseMatrix& q_s) {
  require_same_shape(p_s.p, q_s.p, "coarse_align_loss");
  const std::int64_t b = p_s.batch();
  double loss = 0.0;
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = i + 1; j < b; ++j) {
      const double r = p_s.p.at(i, j) - q_s.p.at(i, j);
      loss += r * r;
    }
  return loss;
}

double fine_align_loss(const Tensor& p_r, const Tensor& q_r, const Tensor& mask) {
  require_same_shape(p_r, q_r, "fine_align_loss");
  require_same_shape(p_r, mask, "fine_align_loss");
  double loss = 0.0;
  for (std::int64_t i = 0; i < p_r.numel(); ++i) {
    const double m = mask[i];
    require(m == 0.0 || m == 1.0, "fine_align_loss: mask entries must be 0 or 1");
    if (m == 1.0) {
      const double r = p_r[i] - q_r[i];
      loss += r * r;
    }
  }
  return loss;
}

double load_balance_loss(const Tensor& router_probs,
                         const std::vector<std::vector<int>>& selected) {
  require(router_probs.ndim() == 2, "load_balance_loss: probs must be [N, E_r]");
  const std::int64_t n = router_probs.dim(0), e = router_probs.dim(1);
  require(n >= 1, "load_balance_loss: empty token set");
  require(static_cast<std::int64_t>(selected.size()) == n,
          "load_balance_loss: one index set per token required");
  const std::size_t k = selected.front().size();
  require(k >= 1, "load_balance_loss: empty selection for token 0");

  std::vector<double> counts(static_cast<std::size_t>(e), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    require(selected[static_cast<std::size_t>(i)].size() == k,
            "load_balance_loss: ragged top-k selections");
    for (int idx : selected[static_cast<std::size_t>(i)]) {
      require(idx >= 0 && idx < e, "load_balance_loss: expert index out of range");
      counts[static_cast<std::size_t>(idx)] += 1.0;
    }
  }
  double loss = 0.0;
  for (std::int64_t ex = 0; ex < e; ++ex) {
    const double f = counts[static_cast<std::size_t>(ex)] /
                     (static_cast<double>(k) * static_cast<double>(n));
    double pbar = 0.0;
    for (std::int64_t i = 0; i < n; ++i) pbar += router_probs.at(i, ex);
    pbar /= static_cast<double>(n);
    loss += f * pbar;
  }
  return static_cast<double>(e) * loss;
}

double total_loss(double diffusion, double coarse, double fine_align, double fine_balance,
                  const LossWeights& w) {
  require(std::isfinite(diffusion) && std::isfinite(coarse) && std::isfinite(fine_align) &&
              std::isfinite(fine_balance),
          "total_loss: non-finite component");
  require(w.lambda1 >= 0.0 && w.lambda2 >= 0.0 && w.lambda3 >= 0.0,
          "total_loss: negative loss weight");
  return diffusion + w.lambda1 * coarse + w.lambda2 * fine_align + w.lambda3 * fine_balance;
}

GradCheckReport grad_check(const std::function<double()>& loss_fn,
                           const std::vector<GradParam>& params, double step, double tolerance) {
  require(step > 0.0, "grad_check: step must be positive");
  GradCheckReport report;
  report.step = step;
  report.tolerance = tolerance;
  report.passed = true;
  for (const GradParam& p : params) {
    require(p.value != nullptr && p.analytic != nullptr,
            "grad_check: parameter '" + p.name + "' missing value or gradient");
    require_same_shape(*p.value, *p.analytic, "grad_check");
    GradCheckEntry entry;
    entry.name = p.name;
    entry.coords = p.value->numel();
    for (std::int64_t i = 0; i < p.value->numel(); ++i) {
      const double keep = (*p.value)[i];
      (*p.value)[i] = keep + step;
      const double up = loss_fn();
      (*p.value)[i] = keep - step;
      const double dn = loss_fn();
      (*p.value)[i] = keep;
      require(std::isfinite(up) && std::isfinite(dn),
              "grad_check: non-finite loss while perturbing '" + p.name + "'");
      const double fd = (up - dn) / (2.0 * step);
      const double an = (*p.analytic)[i];
      const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      entry.max_rel_err = std::max(entry.max_rel_err, err);
    }
    entry.passed = entry.max_rel_err <= tolerance;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.passed = report.passed && entry.passed;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

std::string GradCheckReport::table() const {
  std::ostringstream out;
  std::size_t width = 9;
  for (const auto& e : entries) width = std::max(width, e.name.size());
  out << std::left << std::setw(static_cast<int>(width + 2)) << "parameter"
      << std::setw(8) << "coords" << std::setw(14) << "max_rel_err"
      << "status\n";
  for (const auto& e : entries) {
    out << std::left << std::setw(static_cast<int>(width + 2)) << e.name << std::setw(8)
        << e.coords << std::setw(14) << std::scientific << std::setprecision(3) << e.max_rel_err
        << (e.passed ? "ok" : "FAIL") << "\n";
    out.unsetf(std::ios::scientific);
  }
  out << (passed ? "PASS" : "FAIL") << " (tolerance " << std::scientific << std::setprecision(1)
      << tolerance << ", step " << step << ")\n";
  return out.str();
}

}  // namespace prophy::losses
