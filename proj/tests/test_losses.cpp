// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "prophy/losses.hpp"
#include "prophy/rng.hpp"
#include "prophy/tape.hpp"

using namespace prophy;
using namespace prophy::losses;

TEST_CASE("pairwise cosine closed forms") {
  Tensor same({3, 2}, {2.0, 1.0, 4.0, 2.0, 6.0, 3.0});
  PairwiseMatrix p = pairwise_cosine_matrix(same);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j)
      CHECK(p.p.at(i, j) == doctest::Approx(1.0).epsilon(1e-12));

  Tensor ortho({2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(pairwise_cosine_matrix(ortho).p.at(0, 1) == doctest::Approx(0.0).epsilon(1e-15));

  Tensor pair({2, 3}, {1.0, 1.0, 0.0, 1.0, 0.0, 0.0});
  CHECK(pairwise_cosine_matrix(pair).p.at(0, 1) ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));

  CHECK_THROWS_AS(pairwise_cosine_matrix(Tensor({1, 4})), Error);
}

TEST_CASE("pairwise cosine is symmetric with unit diagonal and bounded entries") {
  Rng rng(21);
  Tensor v({6, 9});
  rng.fill_normal(v);
  PairwiseMatrix p = pairwise_cosine_matrix(v);
  for (std::int64_t i = 0; i < 6; ++i) {
    CHECK(p.p.at(i, i) == 1.0);
    for (std::int64_t j = 0; j < 6; ++j) {
      CHECK(p.p.at(i, j) == p.p.at(j, i));
      CHECK(p.p.at(i, j) <= 1.0 + 1e-12);
      CHECK(p.p.at(i, j) >= -1.0 - 1e-12);
    }
  }
}

TEST_CASE("pairwise cosine zero-norm rule") {
  Tensor v({3, 2}, {1.0, 2.0, 0.0, 0.0, -1.0, 0.7});
  PairwiseMatrix p = pairwise_cosine_matrix(v);
  CHECK(p.p.at(1, 1) == 1.0);
  CHECK(p.p.at(0, 1) == 0.0);
  CHECK(p.p.at(1, 2) == 0.0);
  CHECK(p.p.at(0, 2) != 0.0);
}

TEST_CASE("coarse alignment examples and oracle") {
  Tensor q({2, 2});
  q.at(0, 0) = q.at(1, 1) = 1.0;
  PairwiseMatrix qm{q};
  Tensor pmat = q;
  pmat.at(0, 1) = pmat.at(1, 0) = 1.0;
  CHECK(coarse_align_loss(qm, qm) == 0.0);
  CHECK(coarse_align_loss(PairwiseMatrix{pmat}, qm) == 1.0);

  Rng rng(22);
  Tensor a({3, 3}), b({3, 3});
  rng.fill_normal(a);
  rng.fill_normal(b);
  double expect = 0.0;
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = i + 1; j < 3; ++j) {
      const double r = a.at(i, j) - b.at(i, j);
      expect += r * r;
    }
  CHECK(coarse_align_loss(PairwiseMatrix{a}, PairwiseMatrix{b}) ==
        doctest::Approx(expect).epsilon(1e-15));
  CHECK_THROWS_AS(coarse_align_loss(PairwiseMatrix{a}, PairwiseMatrix{Tensor({2, 2})}), Error);
}

TEST_CASE("coarse alignment ignores row scale through the cosine") {
  Rng rng(23);
  Tensor v({4, 5}), q({4, 4});
  rng.fill_normal(v);
  rng.fill_normal(q);
  const double base = coarse_align_loss(pairwise_cosine_matrix(v), PairwiseMatrix{q});
  Tensor scaled = v;
  for (std::int64_t j = 0; j < 5; ++j) {
    scaled.at(0, j) *= 17.0;
    scaled.at(2, j) *= 0.003;
  }
  const double after = coarse_align_loss(pairwise_cosine_matrix(scaled), PairwiseMatrix{q});
  CHECK(after == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("fine alignment examples and oracle") {
  Tensor zero_mask({2, 3});
  CHECK(fine_align_loss(Tensor({2, 3}), Tensor({2, 3}), zero_mask) == 0.0);

  Tensor p({1, 1}, {0.3}), q({1, 1}, {0.5}), m({1, 1}, {1.0});
  CHECK(fine_align_loss(p, q, m) == doctest::Approx(0.04).epsilon(1e-12));

  Rng rng(24);
  Tensor pr({6, 3}), qr({6, 3}), mask({6, 3});
  rng.fill_normal(pr);
  rng.fill_normal(qr);
  for (std::int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  double expect = 0.0;
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 3; ++j)
      if (mask.at(i, j) == 1.0) {
        const double r = pr.at(i, j) - qr.at(i, j);
        expect += r * r;
      }
  CHECK(fine_align_loss(pr, qr, mask) == doctest::Approx(expect).epsilon(1e-15));

  Tensor bad = mask;
  bad.at(0, 0) = 0.5;
  CHECK_THROWS_AS(fine_align_loss(pr, qr, bad), Error);
  CHECK_THROWS_AS(fine_align_loss(pr, qr, Tensor({3, 6})), Error);
}

TEST_CASE("fine alignment is monotone in mask support") {
  Rng rng(25);
  Tensor pr({5, 4}), qr({5, 4}), mask({5, 4});
  rng.fill_normal(pr);
  rng.fill_normal(qr);
  double prev = 0.0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    mask[i] = 1.0;
    const double cur = fine_align_loss(pr, qr, mask);
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("load balance closed forms") {
  const std::int64_t n = 8, e = 4;
  Tensor probs = Tensor::full({n, e}, 1.0 / static_cast<double>(e));
  std::vector<std::vector<int>> sel;
  for (std::int64_t i = 0; i < n; ++i) sel.push_back({static_cast<int>(i % e)});
  CHECK(load_balance_loss(probs, sel) == doctest::Approx(1.0).epsilon(1e-15));

  Tensor collapse({n, e});
  for (std::int64_t i = 0; i < n; ++i) collapse.at(i, 0) = 1.0;
  std::vector<std::vector<int>> all_zero(n, {0});
  CHECK(load_balance_loss(collapse, all_zero) == doctest::Approx(4.0).epsilon(1e-15));

  CHECK_THROWS_AS(load_balance_loss(Tensor({0, 4}), {}), Error);
}

TEST_CASE("load balance matches the counting oracle") {
  Rng rng(26);
  const std::int64_t n = 64, e = 8;
  const int k = 4;
  Tensor logits({n, e});
  rng.fill_normal(logits, 0.0, 2.0);
  Tensor probs({n, e});
  std::vector<std::vector<int>> sel(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = -1e30, z = 0.0;
    for (std::int64_t j = 0; j < e; ++j) mx = std::max(mx, logits.at(i, j));
    for (std::int64_t j = 0; j < e; ++j) z += (probs.at(i, j) = std::exp(logits.at(i, j) - mx));
    for (std::int64_t j = 0; j < e; ++j) probs.at(i, j) /= z;
    std::vector<int> order(e);
    for (std::int64_t j = 0; j < e; ++j) order[static_cast<std::size_t>(j)] = static_cast<int>(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs.at(i, a) > probs.at(i, b); });
    sel[static_cast<std::size_t>(i)].assign(order.begin(), order.begin() + k);
  }

  double oracle = 0.0;
  for (std::int64_t ex = 0; ex < e; ++ex) {
    double count = 0.0, pbar = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (int s : sel[static_cast<std::size_t>(i)]) count += s == ex ? 1.0 : 0.0;
      pbar += probs.at(i, ex);
    }
    oracle += (count / (k * static_cast<double>(n))) * (pbar / static_cast<double>(n));
  }
  oracle *= static_cast<double>(e);
  CHECK(load_balance_loss(probs, sel) == doctest::Approx(oracle).epsilon(1e-15));
  // Probability-weighted top-k assignment keeps the value at or above the
  // balanced minimum on softmax inputs.
  CHECK(load_balance_loss(probs, sel) >= 1.0);
}

TEST_CASE("total loss arithmetic") {
  LossWeights w;
  CHECK(total_loss(1.0, 0.0, 0.0, 0.0, w) == 1.0);
  CHECK(total_loss(0.5, 1.0, 1.0, 1.0, w) == doctest::Approx(0.63).epsilon(1e-15));

  Rng rng(27);
  for (int t = 0; t < 20; ++t) {
    const double d = rng.normal(), c = rng.normal(), f = rng.normal(), b = rng.normal();
    CHECK(total_loss(d, c, f, b, w) ==
          doctest::Approx(d + 0.1 * c + 0.02 * f + 0.01 * b).epsilon(1e-15));
  }
  CHECK_THROWS_AS(total_loss(NAN, 0, 0, 0, w), Error);
  CHECK_THROWS_AS(total_loss(0, INFINITY, 0, 0, w), Error);
}

TEST_CASE("total loss is affine in each auxiliary with slope lambda") {
  LossWeights w;
  const double base = total_loss(0.7, 2.0, 3.0, 4.0, w);
  CHECK(total_loss(0.7, 3.0, 3.0, 4.0, w) - base == doctest::Approx(w.lambda1).epsilon(1e-12));
  CHECK(total_loss(0.7, 2.0, 4.0, 4.0, w) - base == doctest::Approx(w.lambda2).epsilon(1e-12));
  CHECK(total_loss(0.7, 2.0, 3.0, 5.0, w) - base == doctest::Approx(w.lambda3).epsilon(1e-12));
}

TEST_CASE("grad_check on a quadratic is essentially exact") {
  Tensor p({2}, {1.0, 2.0});
  Tensor analytic({2}, {2.0, 4.0});
  auto loss = [&p]() { return p[0] * p[0] + p[1] * p[1]; };
  GradCheckReport r = grad_check(loss, {{"p", &p, &analytic}}, 1e-5, 1e-4);
  CHECK(r.passed);
  CHECK(r.max_rel_err < 1e-9);
  CHECK(r.table().find("PASS") != std::string::npos);
}

TEST_CASE("grad_check flags wrong gradients and non-finite losses") {
  Tensor p({1}, {3.0});
  Tensor wrong({1}, {100.0});
  auto loss = [&p]() { return p[0] * p[0]; };
  GradCheckReport r = grad_check(loss, {{"p", &p, &wrong}}, 1e-5, 1e-4);
  CHECK(!r.passed);
  CHECK(r.table().find("FAIL") != std::string::npos);

  Tensor q({1}, {0.0});
  Tensor g({1}, {0.0});
  auto bad = [&q]() { return std::sqrt(q[0] - 1.0); };
  CHECK_THROWS_AS(grad_check(bad, {{"q", &q, &g}}, 1e-5, 1e-4), Error);
}

TEST_CASE("grad_check validates coarse loss gradients through a linear map") {
  Rng rng(28);
  const std::int64_t b = 3, din = 4, dout = 5;
  Tensor y({b, din}), w({dout, din}), bias({dout}), q({b, b});
  rng.fill_normal(y);
  rng.fill_normal(w);
  rng.fill_normal(bias);
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < b; ++j) q.at(i, j) = std::tanh(rng.normal());

  // Analytic gradient from the tape.
  ad::Tape t;
  ad::Val wv = t.param(w), bv = t.param(bias);
  ad::Val loss = t.coarse_cosine(t.linear(t.input(y), wv, bv), q);
  t.backward(loss);
  const Tensor gw = t.grad(wv), gb = t.grad(bv);

  // Finite differences evaluate an independent plain-loop pipeline.
  auto loss_fn = [&]() {
    Tensor v({b, dout});
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t o = 0; o < dout; ++o) {
        double acc = bias[o];
        for (std::int64_t j = 0; j < din; ++j) acc += y.at(i, j) * w.at(o, j);
        v.at(i, o) = acc;
      }
    return coarse_align_loss(pairwise_cosine_matrix(v), PairwiseMatrix{q});
  };
  GradCheckReport r =
      grad_check(loss_fn, {{"w", &w, &gw}, {"bias", &bias, &gb}}, 1e-5, 1e-4);
  INFO(r.table());
  CHECK(r.passed);
}

TEST_CASE("grad_check validates fine loss gradients through a projection head") {
  Rng rng(29);
  const std::int64_t n = 6, er = 4, ea = 3;
  Tensor rows({n, er}), w({ea, er}), bias({ea}), q({n, ea}), mask({n, ea});
  rng.fill_normal(rows);
  rng.fill_normal(w);
  rng.fill_normal(bias);
  rng.fill_normal(q);
  for (std::int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;

  ad::Tape t;
  ad::Val wv = t.param(w), bv = t.param(bias);
  ad::Val proj = t.linear(t.input(rows), wv, bv);
  ad::Val masked = t.mul_const(t.sub(proj, t.input(q)), mask);
  ad::Val loss = t.sum(t.mul(masked, masked));
  t.backward(loss);
  const Tensor gw = t.grad(wv), gb = t.grad(bv);

  auto loss_fn = [&]() {
    Tensor proj_plain({n, ea});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t o = 0; o < ea; ++o) {
        double acc = bias[o];
        for (std::int64_t j = 0; j < er; ++j) acc += rows.at(i, j) * w.at(o, j);
        proj_plain.at(i, o) = acc;
      }
    return fine_align_loss(proj_plain, q, mask);
  };
  GradCheckReport r =
      grad_check(loss_fn, {{"head.w", &w, &gw}, {"head.b", &bias, &gb}}, 1e-5, 1e-4);
  INFO(r.table());
  CHECK(r.passed);
}
