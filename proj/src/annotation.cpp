// SPDX-License-Identifier: Apache-2.0
#include "prophy/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "prophy/container.hpp"

namespace prophy::annot {

namespace {

void validate_record(const RawAttentionRecord& rec) {
  require(rec.a.ndim() == 3, "annot: attention must be [layers, answers, video]");
  require(rec.a.dim(0) > 0, "annot: record has no layers");
  require(rec.a.dim(1) > 0, "annot: record has no answer tokens");
  require(rec.grid_f > 0 && rec.grid_h > 0 && rec.grid_w > 0, "annot: bad grid dims");
  require(rec.a.dim(2) ==
              static_cast<std::int64_t>(rec.grid_f) * rec.grid_h * rec.grid_w,
          "annot: video axis does not match the grid");
  require(rec.a.all_finite(), "annot: attention has non-finite entries");
  if (rec.kind == RawAttentionRecord::Kind::phenomenon)
    require(rec.attribute >= 0, "annot: phenomenon record needs an attribute id");
}

/// Catmull-Rom kernel (cubic convolution, a = -0.5).
double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

/// Cubic resampling of one axis with align-corners index mapping.
/// data is treated as [outer, src, inner]; the axis grows to dst.
std::vector<double> resample_axis(const std::vector<double>& data, std::int64_t outer,
                                  std::int64_t src, std::int64_t inner, std::int64_t dst) {
  std::vector<double> out(outer * dst * inner);
  double scale = dst > 1 ? static_cast<double>(src - 1) / static_cast<double>(dst - 1) : 0.0;
  for (std::int64_t j = 0; j < dst; ++j) {
    double pos = scale * static_cast<double>(j);
    auto base = static_cast<std::int64_t>(std::floor(pos));
    double u = pos - static_cast<double>(base);
    double wts[4];
    for (int t = 0; t < 4; ++t) wts[t] = cubic_kernel(u - static_cast<double>(t - 1));
    std::int64_t idx[4];
    for (int t = 0; t < 4; ++t) idx[t] = std::clamp<std::int64_t>(base + t - 1, 0, src - 1);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) acc += wts[t] * data[(o * src + idx[t]) * inner + i];
        out[(o * dst + j) * inner + i] = acc;
      }
  }
  return out;
}

/// Truncated Gaussian smoothing of one axis, renormalized at the borders so
/// constants map to constants exactly.
std::vector<double> smooth_axis(const std::vector<double>& data, std::int64_t outer,
                                std::int64_t len, std::int64_t inner, double sigma) {
  auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
  if (radius <= 0) return data;
  std::vector<double> kernel(2 * radius + 1);
  for (std::int64_t t = -radius; t <= radius; ++t)
    kernel[t + radius] = std::exp(-0.5 * static_cast<double>(t * t) / (sigma * sigma));
  std::vector<double> out(data.size());
  for (std::int64_t j = 0; j < len; ++j) {
    double norm = 0.0;
    for (std::int64_t t = -radius; t <= radius; ++t)
      if (j + t >= 0 && j + t < len) norm += kernel[t + radius];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        double acc = 0.0;
        for (std::int64_t t = -radius; t <= radius; ++t)
          if (j + t >= 0 && j + t < len)
            acc += kernel[t + radius] * data[(o * len + j + t) * inner + i];
        out[(o * len + j) * inner + i] = acc / norm;
      }
  }
  return out;
}

}  // namespace

Tensor average_attention(const RawAttentionRecord& rec) {
  validate_record(rec);
  std::int64_t layers = rec.a.dim(0), answers = rec.a.dim(1), video = rec.a.dim(2);
  Tensor out({video});
  for (std::int64_t v = 0; v < video; ++v) {
    double acc = 0.0;
    for (std::int64_t l = 0; l < layers; ++l)
      for (std::int64_t q = 0; q < answers; ++q) acc += rec.a.at(l, q, v);
    out[v] = acc / static_cast<double>(layers * answers);
  }
  return out;
}

Tensor reshape_to_grid(const Tensor& flat, int f, int h, int w) {
  require(flat.ndim() == 1, "annot: expected a flat [S_v] vector");
  require(f > 0 && h > 0 && w > 0, "annot: grid dims must be positive");
  return flat.reshaped({f, h, w});
}

DiffAttentionMap diff_map(const Tensor& phenom, const Tensor& background, int attribute,
                          bool flip) {
  require_same_shape(phenom, background, "diff_map");
  require(phenom.ndim() == 3, "annot: diff_map expects [F', H', W'] grids");
  DiffAttentionMap out;
  out.attribute = attribute;
  out.d = Tensor(phenom.shape());
  double sign = flip ? -1.0 : 1.0;
  for (std::int64_t i = 0; i < phenom.numel(); ++i)
    out.d[i] = sign * (phenom[i] - background[i]);
  return out;
}

Tensor upsample_to_latent(const Tensor& grid_map, int tf, int th, int tw, double sigma) {
  require(grid_map.ndim() == 3, "annot: upsample expects a [F', H', W'] map");
  std::int64_t sf = grid_map.dim(0), sh = grid_map.dim(1), sw = grid_map.dim(2);
  require(sf > 0 && sh > 0 && sw > 0, "annot: degenerate source axis");
  require(tf > 0 && th > 0 && tw > 0, "annot: degenerate target axis");
  require(tf >= sf && th >= sh && tw >= sw, "annot: target grid must not shrink");
  require(sigma >= 0.0, "annot: sigma must be nonnegative");

  std::vector<double> buf(grid_map.data(), grid_map.data() + grid_map.numel());
  buf = resample_axis(buf, 1, sf, sh * sw, tf);
  buf = resample_axis(buf, tf, sh, sw, th);
  buf = resample_axis(buf, static_cast<std::int64_t>(tf) * th, sw, 1, tw);
  if (sigma > 0.0) {
    buf = smooth_axis(buf, 1, tf, static_cast<std::int64_t>(th) * tw, sigma);
    buf = smooth_axis(buf, tf, th, tw, sigma);
    buf = smooth_axis(buf, static_cast<std::int64_t>(tf) * th, tw, 1, sigma);
  }
  return Tensor({static_cast<std::int64_t>(tf) * th * tw}, std::move(buf));
}

AlignmentTarget build_targets(const std::map<int, Tensor>& maps, std::int64_t n,
                              std::int64_t e_attn) {
  require(n > 0 && e_attn > 0, "annot: target dims must be positive");
  AlignmentTarget out;
  out.q_r = Tensor({n, e_attn});
  for (const auto& [attr, map] : maps) {
    require(attr >= 0 && attr < e_attn, "annot: attribute id out of range");
    require(map.ndim() == 1 && map.dim(0) == n, "annot: per-attribute map length mismatch");
    for (std::int64_t t = 0; t < n; ++t) out.q_r.at(t, attr) = map[t];
  }
  return out;
}

AlignmentMask build_mask(const Tensor& q_r, const std::set<int>& marked, double cap_fraction) {
  require(q_r.ndim() == 2, "annot: Q_r must be [N, E_attn]");
  require(cap_fraction > 0.0 && cap_fraction <= 1.0, "annot: cap fraction must be in (0, 1]");
  std::int64_t n = q_r.dim(0), e_attn = q_r.dim(1);
  auto cap = static_cast<std::int64_t>(
      std::ceil(cap_fraction * static_cast<double>(n) - 1e-9));
  AlignmentMask out;
  out.m = Tensor({n, e_attn});
  out.marked = marked;
  for (int attr : marked) {
    require(attr >= 0 && attr < e_attn, "annot: marked attribute out of range");
    std::vector<std::int64_t> positive;
    for (std::int64_t t = 0; t < n; ++t)
      if (q_r.at(t, attr) > 0.0) positive.push_back(t);
    std::sort(positive.begin(), positive.end(), [&](std::int64_t lhs, std::int64_t rhs) {
      double a = q_r.at(lhs, attr), b = q_r.at(rhs, attr);
      if (a != b) return a > b;
      return lhs < rhs;
    });
    if (static_cast<std::int64_t>(positive.size()) > cap) positive.resize(cap);
    for (std::int64_t t : positive) out.m.at(t, attr) = 1.0;
  }
  return out;
}

std::pair<AlignmentTarget, AlignmentMask> synthetic_oracle_targets(
    const synth::SyntheticSample& sample, double cap_fraction) {
  Tensor occ = synth::token_occupancy(sample);
  AlignmentTarget target;
  target.q_r = occ;
  std::set<int> marked;
  for (const auto& spec : sample.specs) marked.insert(synth::category_for(spec.kind));
  AlignmentMask mask = build_mask(target.q_r, marked, cap_fraction);
  return {std::move(target), std::move(mask)};
}

void save_record(const std::string& dir, const RawAttentionRecord& rec) {
  validate_record(rec);
  io::Container c;
  c.set_meta("kind", rec.kind == RawAttentionRecord::Kind::phenomenon ? "phenomenon"
                                                                      : "background");
  c.set_meta("attribute", std::to_string(rec.attribute));
  c.set_meta("grid_f", std::to_string(rec.grid_f));
  c.set_meta("grid_h", std::to_string(rec.grid_h));
  c.set_meta("grid_w", std::to_string(rec.grid_w));
  c.add("a", rec.a, io::DType::f32);
  c.save(dir);
}

RawAttentionRecord load_record(const std::string& dir) {
  io::Container c = io::Container::load(dir);
  RawAttentionRecord rec;
  const std::string& kind = c.meta("kind");
  if (kind == "phenomenon")
    rec.kind = RawAttentionRecord::Kind::phenomenon;
  else if (kind == "background")
    rec.kind = RawAttentionRecord::Kind::background;
  else
    throw Error("annot: unknown record kind '" + kind + "'");
  rec.attribute = std::stoi(c.meta("attribute"));
  rec.grid_f = std::stoi(c.meta("grid_f"));
  rec.grid_h = std::stoi(c.meta("grid_h"));
  rec.grid_w = std::stoi(c.meta("grid_w"));
  rec.a = c.tensor("a");
  validate_record(rec);
  return rec;
}

void save_alignment(const std::string& dir, const AlignmentTarget& target,
                    const AlignmentMask& mask) {
  require_same_shape(target.q_r, mask.m, "alignment target vs mask");
  io::Container c;
  std::string marked;
  for (int attr : mask.marked) {
    if (!marked.empty()) marked += ",";
    marked += std::to_string(attr);
  }
  c.set_meta("marked", marked.empty() ? "-" : marked);
  c.add("q_r", target.q_r, io::DType::f32);
  c.add("mask", mask.m, io::DType::f32);
  c.save(dir);
}

std::pair<AlignmentTarget, AlignmentMask> load_alignment(const std::string& dir) {
  io::Container c = io::Container::load(dir);
  AlignmentTarget target;
  target.q_r = c.tensor("q_r");
  AlignmentMask mask;
  mask.m = c.tensor("mask");
  require_same_shape(target.q_r, mask.m, "alignment target vs mask");
  const std::string& marked = c.meta("marked");
  if (marked != "-") {
    std::size_t start = 0;
    while (start < marked.size()) {
      std::size_t comma = marked.find(',', start);
      if (comma == std::string::npos) comma = marked.size();
      mask.marked.insert(std::stoi(marked.substr(start, comma - start)));
      start = comma + 1;
    }
  }
  return {std::move(target), std::move(mask)};
}

}  // namespace prophy::annot
