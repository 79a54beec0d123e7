// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "prophy/annotation.hpp"
#include "prophy/losses.hpp"
#include "prophy/rng.hpp"
#include "prophy/synthdata.hpp"
#include "prophy/tensor.hpp"

using namespace prophy;
using namespace prophy::annot;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("prophy_test_" + tag);
  fs::remove_all(p);
  return p;
}

RawAttentionRecord make_record(Tensor a, int f, int h, int w) {
  RawAttentionRecord rec;
  rec.a = std::move(a);
  rec.grid_f = f;
  rec.grid_h = h;
  rec.grid_w = w;
  rec.kind = RawAttentionRecord::Kind::background;
  return rec;
}

}  // namespace

TEST_CASE("average_attention of a constant tensor is that constant") {
  Tensor a({3, 4, 8});
  a.fill(0.625);
  Tensor v = average_attention(make_record(std::move(a), 2, 2, 2));
  REQUIRE(v.numel() == 8);
  for (std::int64_t i = 0; i < 8; ++i) CHECK(v[i] == doctest::Approx(0.625).epsilon(1e-15));
}

TEST_CASE("average_attention matches the nested-loop double mean oracle") {
  Rng rng(17);
  Tensor a({2, 3, 8});
  rng.fill_uniform(a);
  Tensor v = average_attention(make_record(a, 2, 2, 2));
  for (std::int64_t t = 0; t < 8; ++t) {
    double acc = 0.0;
    for (int l = 0; l < 2; ++l)
      for (int q = 0; q < 3; ++q) acc += a.at(l, q, t);
    CHECK(v[t] == doctest::Approx(acc / 6.0).epsilon(1e-14));
  }
}

TEST_CASE("average_attention over one layer and one query is the row itself") {
  Rng rng(3);
  Tensor a({1, 1, 12});
  rng.fill_uniform(a);
  Tensor v = average_attention(make_record(a, 3, 2, 2));
  for (std::int64_t t = 0; t < 12; ++t) CHECK(v[t] == a.at(0, 0, t));
}

TEST_CASE("average_attention mean order commutes") {
  Rng rng(8);
  Tensor a({4, 5, 6});
  rng.fill_uniform(a);
  Tensor v = average_attention(make_record(a, 1, 2, 3));
  for (std::int64_t t = 0; t < 6; ++t) {
    double by_layers = 0.0;
    for (int l = 0; l < 4; ++l) {
      double q_mean = 0.0;
      for (int q = 0; q < 5; ++q) q_mean += a.at(l, q, t);
      by_layers += q_mean / 5.0;
    }
    by_layers /= 4.0;
    double by_queries = 0.0;
    for (int q = 0; q < 5; ++q) {
      double l_mean = 0.0;
      for (int l = 0; l < 4; ++l) l_mean += a.at(l, q, t);
      by_queries += l_mean / 4.0;
    }
    by_queries /= 5.0;
    CHECK(std::abs(by_layers - by_queries) <= 1e-12);
    CHECK(v[t] == doctest::Approx(by_layers).epsilon(1e-13));
  }
}

TEST_CASE("average_attention rejects empty or mismatched records") {
  CHECK_THROWS_AS(average_attention(make_record(Tensor({0, 2, 8}), 2, 2, 2)), Error);
  CHECK_THROWS_AS(average_attention(make_record(Tensor({2, 0, 8}), 2, 2, 2)), Error);
  CHECK_THROWS_AS(average_attention(make_record(Tensor({2, 2, 9}), 2, 2, 2)), Error);
  Tensor bad({1, 1, 4});
  bad[2] = std::nan("");
  CHECK_THROWS_AS(average_attention(make_record(std::move(bad), 1, 2, 2)), Error);
}

TEST_CASE("reshape_to_grid is row-major") {
  Tensor flat({8});
  for (int i = 0; i < 8; ++i) flat[i] = i;
  Tensor g = reshape_to_grid(flat, 2, 2, 2);
  CHECK(g.at(1, 0, 1) == 5.0);
  CHECK(g.at(0, 1, 0) == 2.0);
  CHECK_THROWS_AS(reshape_to_grid(Tensor({6}), 2, 2, 2), Error);
}

TEST_CASE("reshape_to_grid round-trips through flatten") {
  Rng rng(21);
  Tensor flat({24});
  rng.fill_uniform(flat);
  Tensor g = reshape_to_grid(flat, 2, 3, 4);
  Tensor back = g.reshaped({24});
  CHECK(max_abs_diff(back, flat) == 0.0);
}

TEST_CASE("diff_map subtracts background from phenomenon") {
  Rng rng(5);
  Tensor p({2, 3, 3});
  Tensor b({2, 3, 3});
  rng.fill_uniform(p);
  rng.fill_uniform(b);

  DiffAttentionMap self = diff_map(p, p, 4);
  for (std::int64_t i = 0; i < self.d.numel(); ++i) CHECK(self.d[i] == 0.0);
  CHECK(self.attribute == 4);

  Tensor shifted = p;
  for (std::int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 1.0;
  DiffAttentionMap ones = diff_map(shifted, p, 0);
  for (std::int64_t i = 0; i < ones.d.numel(); ++i)
    CHECK(ones.d[i] == doctest::Approx(1.0).epsilon(1e-15));

  DiffAttentionMap ab = diff_map(p, b, 1);
  DiffAttentionMap ba = diff_map(b, p, 1);
  DiffAttentionMap flipped = diff_map(p, b, 1, true);
  for (std::int64_t i = 0; i < ab.d.numel(); ++i) {
    CHECK(ab.d[i] == doctest::Approx(p[i] - b[i]).epsilon(1e-15));
    CHECK(ab.d[i] == -ba.d[i]);
    CHECK(flipped.d[i] == ba.d[i]);
  }

  CHECK_THROWS_AS(diff_map(p, Tensor({2, 3, 4}), 0), Error);
}

TEST_CASE("upsample preserves constants") {
  Tensor src({2, 3, 3});
  src.fill(0.42);
  for (double sigma : {0.0, 0.5, 1.25}) {
    Tensor up = upsample_to_latent(src, 4, 8, 8, sigma);
    REQUIRE(up.numel() == 4 * 8 * 8);
    for (std::int64_t i = 0; i < up.numel(); ++i)
      CHECK(std::abs(up[i] - 0.42) <= 1e-10);
  }
}

TEST_CASE("upsample with matching grid and sigma zero is the identity") {
  Rng rng(9);
  Tensor src({3, 4, 5});
  rng.fill_uniform(src);
  Tensor up = upsample_to_latent(src, 3, 4, 5, 0.0);
  Tensor flat = src.reshaped({60});
  CHECK(max_abs_diff(up, flat) == 0.0);
}

TEST_CASE("cubic upsampling reproduces a linear ramp in the interior") {
  // Ramp along the last axis; 2x upsample with align-corners maps output j
  // to source position j/2, so interior values should equal j/2.
  Tensor src({1, 1, 5});
  for (int i = 0; i < 5; ++i) src.at(0, 0, i) = static_cast<double>(i);
  Tensor up = upsample_to_latent(src, 1, 1, 9, 0.0);
  for (int j = 2; j <= 6; ++j)
    CHECK(std::abs(up[j] - 0.5 * j) <= 1e-6);
}

TEST_CASE("upsample rejects degenerate and shrinking grids") {
  Tensor src({2, 2, 2});
  CHECK_THROWS_AS(upsample_to_latent(Tensor({0, 2, 2}), 2, 2, 2, 0.0), Error);
  CHECK_THROWS_AS(upsample_to_latent(src, 0, 2, 2, 0.0), Error);
  CHECK_THROWS_AS(upsample_to_latent(src, 1, 2, 2, 0.0), Error);
  CHECK_THROWS_AS(upsample_to_latent(src, 2, 2, 2, -0.5), Error);
}

TEST_CASE("build_targets fills exactly the annotated columns") {
  AlignmentTarget none = build_targets({}, 6, 4);
  for (std::int64_t i = 0; i < none.q_r.numel(); ++i) CHECK(none.q_r[i] == 0.0);

  Rng rng(2);
  Tensor m0({6});
  Tensor m2({6});
  rng.fill_uniform(m0);
  rng.fill_uniform(m2);
  AlignmentTarget two = build_targets({{0, m0}, {2, m2}}, 6, 4);
  for (std::int64_t t = 0; t < 6; ++t) {
    CHECK(two.q_r.at(t, 0) == m0[t]);
    CHECK(two.q_r.at(t, 2) == m2[t]);
    CHECK(two.q_r.at(t, 1) == 0.0);
    CHECK(two.q_r.at(t, 3) == 0.0);
  }

  CHECK_THROWS_AS(build_targets({{0, Tensor({5})}}, 6, 4), Error);
  CHECK_THROWS_AS(build_targets({{4, m0}}, 6, 4), Error);
}

TEST_CASE("build_mask applies the sign rule and the ten percent cap") {
  Rng rng(11);
  Tensor q({10, 3});
  rng.fill_uniform(q, 0.1, 1.0);

  AlignmentMask empty = build_mask(q, {});
  for (std::int64_t i = 0; i < empty.m.numel(); ++i) CHECK(empty.m[i] == 0.0);

  Tensor neg = q;
  for (std::int64_t t = 0; t < 10; ++t) neg.at(t, 1) = -neg.at(t, 1);
  AlignmentMask signed_mask = build_mask(neg, {1});
  for (std::int64_t i = 0; i < signed_mask.m.numel(); ++i) CHECK(signed_mask.m[i] == 0.0);

  // cap = ceil(0.10 * 10) = 1: only the argmax of the column survives.
  AlignmentMask capped = build_mask(q, {2});
  std::int64_t best = 0;
  for (std::int64_t t = 1; t < 10; ++t)
    if (q.at(t, 2) > q.at(best, 2)) best = t;
  for (std::int64_t t = 0; t < 10; ++t)
    CHECK(capped.m.at(t, 2) == (t == best ? 1.0 : 0.0));

  CHECK_THROWS_AS(build_mask(q, {0}, 0.0), Error);
  CHECK_THROWS_AS(build_mask(q, {0}, 1.5), Error);
  CHECK_THROWS_AS(build_mask(q, {7}), Error);
}

TEST_CASE("build_mask ties go to the lowest token index") {
  Tensor q({6, 1});
  q.at(0, 0) = 0.5;
  q.at(1, 0) = 0.9;
  q.at(2, 0) = 0.9;
  q.at(3, 0) = 0.9;
  q.at(4, 0) = 0.1;
  q.at(5, 0) = 0.0;
  AlignmentMask mask = build_mask(q, {0}, 1.0 / 3.0);  // cap = ceil(2) = 2
  CHECK(mask.m.at(1, 0) == 1.0);
  CHECK(mask.m.at(2, 0) == 1.0);
  CHECK(mask.m.at(0, 0) == 0.0);
  CHECK(mask.m.at(3, 0) == 0.0);
  CHECK(mask.m.at(5, 0) == 0.0);
}

TEST_CASE("build_mask matches a brute-force selection oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::int64_t n = 5 + rng.uniform_int(40);
    std::int64_t e = 1 + rng.uniform_int(5);
    Tensor q({n, e});
    rng.fill_normal(q);
    std::set<int> marked;
    for (int a = 0; a < e; ++a)
      if (rng.uniform() < 0.6) marked.insert(a);
    double cap_fraction = rng.uniform(0.05, 1.0);
    AlignmentMask mask = build_mask(q, marked, cap_fraction);

    auto cap = static_cast<std::int64_t>(std::ceil(cap_fraction * double(n) - 1e-9));
    for (int a = 0; a < e; ++a) {
      std::vector<std::pair<double, std::int64_t>> pos;
      for (std::int64_t t = 0; t < n; ++t)
        if (q.at(t, a) > 0.0) pos.push_back({q.at(t, a), t});
      std::stable_sort(pos.begin(), pos.end(), [](const auto& lhs, const auto& rhs) {
        return lhs.first > rhs.first;
      });
      std::set<std::int64_t> keep;
      for (std::int64_t i = 0; i < std::min<std::int64_t>(cap, pos.size()); ++i)
        keep.insert(pos[i].second);
      std::int64_t selected = 0;
      for (std::int64_t t = 0; t < n; ++t) {
        double expect = marked.count(a) && keep.count(t) ? 1.0 : 0.0;
        CHECK(mask.m.at(t, a) == expect);
        if (mask.m.at(t, a) == 1.0) {
          ++selected;
          CHECK(q.at(t, a) > 0.0);
        }
      }
      CHECK(selected <= cap);
    }
  }
}

TEST_CASE("synthetic oracle targets mirror generator ground truth") {
  synth::VideoGeometry geom;
  synth::SyntheticSample empty = synth::generate_sample(3, {}, geom, 8, 7);
  auto [tgt0, msk0] = synthetic_oracle_targets(empty);
  for (std::int64_t i = 0; i < tgt0.q_r.numel(); ++i) {
    CHECK(tgt0.q_r[i] == 0.0);
    CHECK(msk0.m[i] == 0.0);
  }
  CHECK(msk0.marked.empty());

  synth::PhenomenonSpec bounce;
  bounce.kind = synth::Phenomenon::bounce;
  bounce.region = {8, 8, 16, 16};
  bounce.py = 16.0;
  bounce.px = 16.0;
  bounce.vy = 1.0;
  bounce.vx = -1.5;
  bounce.radius = 2.5;
  synth::SyntheticSample one = synth::generate_sample(4, {bounce}, geom, 8, 7);
  auto [tgt1, msk1] = synthetic_oracle_targets(one);
  CHECK(msk1.marked == std::set<int>{0});
  for (std::int64_t t = 0; t < geom.tokens(); ++t) {
    CHECK((tgt1.q_r.at(t, 0) > 0.0) == (one.token_masks.at(t, 0) == 1.0));
    for (int a = 1; a < 5; ++a) CHECK(tgt1.q_r.at(t, a) == 0.0);
  }

  std::int64_t cap = static_cast<std::int64_t>(std::ceil(0.10 * geom.tokens() - 1e-9));
  std::int64_t picked = 0;
  for (std::int64_t t = 0; t < geom.tokens(); ++t) picked += msk1.m.at(t, 0) > 0.0 ? 1 : 0;
  CHECK(picked >= 1);
  CHECK(picked <= cap);
}

TEST_CASE("overlapping phenomena yield two positive columns over the overlap") {
  synth::VideoGeometry geom;
  synth::PhenomenonSpec a;
  a.kind = synth::Phenomenon::diffuse;
  a.region = {8, 8, 18, 18};
  a.py = 17.0;
  a.px = 17.0;
  a.radius = 3.0;
  a.p0 = 1.0;
  synth::PhenomenonSpec b = a;
  b.kind = synth::Phenomenon::flash;
  b.p0 = 3.0;
  b.p1 = 2.0;
  synth::SyntheticSample s = synth::generate_sample(12, {a, b}, geom, 8, 7);
  auto [tgt, msk] = synthetic_oracle_targets(s);
  CHECK(msk.marked == std::set<int>({1, 2}));
  int overlap = 0;
  for (std::int64_t t = 0; t < geom.tokens(); ++t)
    if (tgt.q_r.at(t, 1) > 0.0 && tgt.q_r.at(t, 2) > 0.0) ++overlap;
  CHECK(overlap > 0);
}

TEST_CASE("a perfect predictor gives exactly zero fine alignment loss") {
  synth::VideoGeometry geom;
  synth::PhenomenonSpec spec;
  spec.kind = synth::Phenomenon::slide;
  spec.region = {4, 4, 20, 20};
  spec.py = 10.0;
  spec.px = 10.0;
  spec.vy = 1.0;
  spec.vx = 1.0;
  spec.radius = 3.0;
  synth::SyntheticSample s = synth::generate_sample(9, {spec}, geom, 8, 7);
  auto [tgt, msk] = synthetic_oracle_targets(s);
  CHECK(losses::fine_align_loss(tgt.q_r, tgt.q_r, msk.m) == 0.0);
}

TEST_CASE("attention records round-trip through the container") {
  Rng rng(31);
  Tensor a({2, 3, 12});
  for (std::int64_t i = 0; i < a.numel(); ++i)
    a[i] = static_cast<double>(rng.uniform_int(1024)) / 1024.0;  // exact in f32
  RawAttentionRecord rec;
  rec.a = a;
  rec.grid_f = 3;
  rec.grid_h = 2;
  rec.grid_w = 2;
  rec.kind = RawAttentionRecord::Kind::phenomenon;
  rec.attribute = 7;

  auto dir = temp_dir("attnrec");
  save_record(dir.string(), rec);
  RawAttentionRecord back = load_record(dir.string());
  CHECK(back.kind == RawAttentionRecord::Kind::phenomenon);
  CHECK(back.attribute == 7);
  CHECK(back.grid_f == 3);
  CHECK(back.grid_h == 2);
  CHECK(back.grid_w == 2);
  CHECK(max_abs_diff(back.a, rec.a) == 0.0);
  fs::remove_all(dir);

  CHECK_THROWS_AS(load_record("/nonexistent/record"), Error);
}

TEST_CASE("alignment targets round-trip through the container") {
  Tensor q({8, 3});
  for (std::int64_t i = 0; i < q.numel(); ++i) q[i] = static_cast<double>(i % 5) / 4.0;
  AlignmentTarget tgt{q};
  AlignmentMask msk = build_mask(q, {0, 2}, 0.5);
  auto dir = temp_dir("alignio");
  save_alignment(dir.string(), tgt, msk);
  auto [t2, m2] = load_alignment(dir.string());
  CHECK(max_abs_diff(t2.q_r, tgt.q_r) == 0.0);
  CHECK(max_abs_diff(m2.m, msk.m) == 0.0);
  CHECK(m2.marked == msk.marked);
  fs::remove_all(dir);
}
