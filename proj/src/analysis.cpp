// SPDX-License-Identifier: Apache-2.0
#include "prophy/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "prophy/container.hpp"
#include "prophy/linalg.hpp"
#include "prophy/tape.hpp"

namespace prophy::analysis {

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }

std::string fmt9(double x) {
  std::ostringstream out;
  out << std::setprecision(9) << x;
  return out.str();
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "analysis: cannot write " + path.string());
  return out;
}

}  // namespace

Tensor semantic_logits(const model::Denoiser& d, const std::vector<int>& caption) {
  const model::ParamStore& p = d.params();
  Tensor y_vec = d.text_embedding(caption, false);
  Tensor y({1, y_vec.numel()});
  for (std::int64_t j = 0; j < y_vec.numel(); ++j) y.at(0, j) = y_vec[j];
  Tensor h = linalg::affine(y, p.value("branch.seb.router.w1"), p.value("branch.seb.router.b1"));
  for (std::int64_t i = 0; i < h.numel(); ++i) h[i] = gelu(h[i]);
  Tensor logits =
      linalg::affine(h, p.value("branch.seb.router.w2"), p.value("branch.seb.router.b2"));
  return logits.reshaped({logits.dim(1)});
}

std::vector<int> category_prompt(int category, Rng& rng) {
  std::vector<synth::Phenomenon> kinds;
  for (int k = 0; k < synth::kPhenomenonKinds; ++k) {
    auto kind = static_cast<synth::Phenomenon>(k);
    if (synth::category_for(kind) == category) kinds.push_back(kind);
  }
  require(!kinds.empty(),
          "analysis: no phenomenon maps to category " + std::to_string(category));
  synth::Phenomenon kind = kinds[static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(kinds.size())))];
  std::vector<int> caption(synth::kCaptionLen, synth::kFillerToken);
  caption[static_cast<std::size_t>(rng.uniform_int(synth::kCaptionLen))] =
      synth::caption_token(kind);
  return caption;
}

LogitCollection collect_semantic_logits(const model::Denoiser& d,
                                        const std::vector<int>& categories, int per_group,
                                        std::uint64_t seed) {
  require(!categories.empty(), "analysis: no categories requested");
  require(per_group >= 1, "analysis: per_group must be positive");
  Rng rng(derive_seed(seed, "analysis.prompts"));
  const std::int64_t e = d.config().e_s;
  LogitCollection coll;
  coll.rows = Tensor({static_cast<std::int64_t>(categories.size()) * per_group, e});
  coll.groups = categories;
  std::int64_t row = 0;
  for (int category : categories) {
    for (int i = 0; i < per_group; ++i, ++row) {
      Tensor logits = semantic_logits(d, category_prompt(category, rng));
      for (std::int64_t j = 0; j < e; ++j) coll.rows.at(row, j) = logits[j];
      coll.labels.push_back(category);
    }
  }
  return coll;
}

PearsonResult pearson_matrix(const LogitCollection& coll) {
  const std::int64_t e = coll.rows.dim(1);
  const int g = static_cast<int>(coll.groups.size());
  require(g >= 1, "analysis: empty collection");

  Tensor means({g, e});
  for (int gi = 0; gi < g; ++gi) {
    std::int64_t count = 0;
    for (std::size_t r = 0; r < coll.labels.size(); ++r) {
      if (coll.labels[r] != coll.groups[static_cast<std::size_t>(gi)]) continue;
      for (std::int64_t j = 0; j < e; ++j)
        means.at(gi, j) += coll.rows.at(static_cast<std::int64_t>(r), j);
      ++count;
    }
    require(count >= 2, "analysis: pearson needs at least 2 rows per group");
    for (std::int64_t j = 0; j < e; ++j) means.at(gi, j) /= static_cast<double>(count);
  }

  PearsonResult result;
  result.groups = coll.groups;
  result.r = Tensor({g, g});
  result.defined.assign(static_cast<std::size_t>(g) * g, 1);
  std::vector<double> mu(static_cast<std::size_t>(g)), var(static_cast<std::size_t>(g));
  for (int gi = 0; gi < g; ++gi) {
    double m = 0.0;
    for (std::int64_t j = 0; j < e; ++j) m += means.at(gi, j);
    m /= static_cast<double>(e);
    double v = 0.0;
    for (std::int64_t j = 0; j < e; ++j) {
      const double dd = means.at(gi, j) - m;
      v += dd * dd;
    }
    mu[static_cast<std::size_t>(gi)] = m;
    var[static_cast<std::size_t>(gi)] = v;
  }
  for (int a = 0; a < g; ++a) {
    result.r.at(a, a) = 1.0;
    for (int b = a + 1; b < g; ++b) {
      if (var[static_cast<std::size_t>(a)] <= 0.0 || var[static_cast<std::size_t>(b)] <= 0.0) {
        result.defined[static_cast<std::size_t>(a) * g + b] = 0;
        result.defined[static_cast<std::size_t>(b) * g + a] = 0;
        continue;
      }
      double cov = 0.0;
      for (std::int64_t j = 0; j < e; ++j)
        cov += (means.at(a, j) - mu[static_cast<std::size_t>(a)]) *
               (means.at(b, j) - mu[static_cast<std::size_t>(b)]);
      const double r =
          cov / std::sqrt(var[static_cast<std::size_t>(a)] * var[static_cast<std::size_t>(b)]);
      result.r.at(a, b) = r;
      result.r.at(b, a) = r;
    }
  }
  return result;
}

PcaResult pca_project(const LogitCollection& coll, int dims) {
  const std::int64_t m = coll.rows.dim(0), e = coll.rows.dim(1);
  require(dims >= 1, "analysis: pca needs at least one component");
  require(m > dims, "analysis: pca needs more rows than components");

  Tensor centered = coll.rows;
  for (std::int64_t j = 0; j < e; ++j) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < m; ++i) mean += centered.at(i, j);
    mean /= static_cast<double>(m);
    for (std::int64_t i = 0; i < m; ++i) centered.at(i, j) -= mean;
  }

  linalg::EMat x = linalg::as_mat(centered);
  linalg::EMat cov = (x.transpose() * x) / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<linalg::EMat> solver(cov);
  require(solver.info() == Eigen::Success, "analysis: eigendecomposition failed");
  Eigen::VectorXd evals = solver.eigenvalues();  // ascending
  linalg::EMat evecs = solver.eigenvectors();    // columns match evals

  double trace = 0.0, largest = 0.0;
  for (std::int64_t j = 0; j < e; ++j) {
    trace += std::max(evals[j], 0.0);
    largest = std::max(largest, evals[j]);
  }
  const double floor = largest * 1e-12;

  PcaResult result;
  result.components = Tensor({dims, e});
  result.ratios.assign(static_cast<std::size_t>(dims), 0.0);
  for (int d = 0; d < dims; ++d) {
    const std::int64_t src = e - 1 - d;
    if (src < 0 || evals[src] <= floor) continue;  // beyond rank: zeros
    std::int64_t peak = 0;
    for (std::int64_t j = 1; j < e; ++j)
      if (std::abs(evecs(j, src)) > std::abs(evecs(peak, src))) peak = j;
    const double sign = evecs(peak, src) < 0.0 ? -1.0 : 1.0;
    for (std::int64_t j = 0; j < e; ++j) result.components.at(d, j) = sign * evecs(j, src);
    if (trace > 0.0) result.ratios[static_cast<std::size_t>(d)] = evals[src] / trace;
  }
  result.projected = linalg::affine(centered, result.components, Tensor());
  return result;
}

ActivationMaps expert_activation_maps(const model::Denoiser& d, const Tensor& x_t, double t,
                                      const std::vector<int>& caption) {
  const model::BackboneConfig& cfg = d.config();
  require(x_t.ndim() == 2 && x_t.dim(0) == cfg.tokens() && x_t.dim(1) == cfg.channels,
          "analysis: probe state shape " + shape_str(x_t.shape()) +
              " does not match the model grid");
  model::BatchInput batch;
  batch.x_t = x_t;
  batch.t = {t};
  batch.captions = {caption};
  batch.use_null = {0};
  ad::Tape tp;
  model::ForwardHandles h = d.build(tp, batch);

  ActivationMaps out;
  out.rho_r = tp.value(h.rho_r);
  out.attr = tp.value(h.attr_map);
  out.maps = Tensor({static_cast<std::int64_t>(cfg.e_attn), static_cast<std::int64_t>(cfg.grid_f),
                     static_cast<std::int64_t>(cfg.grid_h),
                     static_cast<std::int64_t>(cfg.grid_w)});
  std::int64_t token = 0;
  for (int f = 0; f < cfg.grid_f; ++f)
    for (int y = 0; y < cfg.grid_h; ++y)
      for (int x = 0; x < cfg.grid_w; ++x, ++token)
        for (int e = 0; e < cfg.e_attn; ++e)
          out.maps[((static_cast<std::int64_t>(e) * cfg.grid_f + f) * cfg.grid_h + y) *
                       cfg.grid_w +
                   x] = out.attr.at(token, e);
  return out;
}

Tensor probe_state(const Tensor& latent, double t, std::uint64_t seed) {
  Tensor noise(latent.shape());
  Rng rng(derive_seed(seed, "probe.noise"));
  rng.fill_normal(noise);
  Tensor x(latent.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = (1.0 - t) * noise[i] + t * latent[i];
  return x;
}

InvertResult invert_experiment(const model::Denoiser& d, const std::vector<int>& caption,
                               int steps, std::uint64_t seed, double guidance) {
  InvertResult result;
  result.normal = d.sample(caption, steps, seed, guidance, false);
  result.inverted = d.sample(caption, steps, seed, guidance, true);
  double acc = 0.0;
  for (std::int64_t i = 0; i < result.normal.numel(); ++i) {
    const double diff = result.normal[i] - result.inverted[i];
    acc += diff * diff;
  }
  result.l2 = std::sqrt(acc);

  const model::BackboneConfig& cfg = d.config();
  Tensor x0({cfg.tokens(), cfg.channels});
  Rng rng(derive_seed(seed, "sample.init"));
  rng.fill_normal(x0);
  model::BatchInput batch;
  batch.x_t = x0;
  batch.t = {0.0};
  batch.captions = {caption};
  batch.use_null = {0};
  ad::Tape ta;
  model::ForwardHandles ha = d.build(ta, batch);
  batch.invert_refinement = true;
  ad::Tape tb;
  model::ForwardHandles hb = d.build(tb, batch);
  const std::int64_t n = cfg.tokens();
  std::int64_t changed = 0;
  for (std::int64_t tok = 0; tok < n; ++tok) {
    std::set<std::int32_t> a, b;
    for (int s = 0; s < cfg.top_k; ++s) {
      a.insert(ha.expert_slots[static_cast<std::size_t>(tok * cfg.top_k + s)]);
      b.insert(hb.expert_slots[static_cast<std::size_t>(tok * cfg.top_k + s)]);
    }
    if (a != b) ++changed;
  }
  result.changed_fraction = static_cast<double>(changed) / static_cast<double>(n);
  return result;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  require(image.ndim() == 2, "analysis: pgm expects a 2-d image");
  const std::int64_t h = image.dim(0), w = image.dim(1);
  require(h > 0 && w > 0, "analysis: pgm expects a non-empty image");
  double lo = image[0], hi = image[0];
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    lo = std::min(lo, image[i]);
    hi = std::max(hi, image[i]);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "analysis: cannot write " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  const double span = hi - lo;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(image.numel()));
  for (std::int64_t i = 0; i < image.numel(); ++i)
    bytes[static_cast<std::size_t>(i)] =
        span == 0.0 ? 128
                    : static_cast<unsigned char>(
                          std::lround((image[i] - lo) / span * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  require(out.good(), "analysis: short write for " + path.string());
}

void save_pearson_csv(const std::filesystem::path& path, const PearsonResult& result) {
  std::ofstream out = open_out(path);
  out << "group_a,group_b,r,defined\n";
  const int g = static_cast<int>(result.groups.size());
  for (int a = 0; a < g; ++a)
    for (int b = 0; b < g; ++b)
      out << result.groups[static_cast<std::size_t>(a)] << ","
          << result.groups[static_cast<std::size_t>(b)] << "," << fmt9(result.r.at(a, b)) << ","
          << (result.pair_defined(a, b) ? 1 : 0) << "\n";
  require(out.good(), "analysis: csv write failed for " + path.string());
}

void save_pca_csv(const std::filesystem::path& path, const PcaResult& result,
                  const std::vector<int>& labels) {
  require(static_cast<std::int64_t>(labels.size()) == result.projected.dim(0),
          "analysis: pca labels do not match rows");
  std::ofstream out = open_out(path);
  const std::int64_t dims = result.projected.dim(1);
  out << "label";
  for (std::int64_t d = 0; d < dims; ++d) out << ",pc" << (d + 1);
  out << "\n";
  for (std::int64_t i = 0; i < result.projected.dim(0); ++i) {
    out << labels[static_cast<std::size_t>(i)];
    for (std::int64_t d = 0; d < dims; ++d) out << "," << fmt9(result.projected.at(i, d));
    out << "\n";
  }
  require(out.good(), "analysis: csv write failed for " + path.string());

  std::filesystem::path rpath = path;
  rpath.replace_filename(path.stem().string() + "_ratios.csv");
  std::ofstream rout = open_out(rpath);
  rout << "component,ratio\n";
  for (std::size_t d = 0; d < result.ratios.size(); ++d)
    rout << (d + 1) << "," << fmt9(result.ratios[d]) << "\n";
  require(rout.good(), "analysis: csv write failed for " + rpath.string());
}

void save_maps(const std::filesystem::path& dir, const ActivationMaps& maps) {
  io::Container c;
  c.set_meta("format", "prophy-maps");
  c.add("rho_r", maps.rho_r, io::DType::f64);
  c.add("attr", maps.attr, io::DType::f64);
  c.add("maps", maps.maps, io::DType::f64);
  c.save(dir);

  const std::int64_t e_attn = maps.maps.dim(0), f = maps.maps.dim(1), h = maps.maps.dim(2),
                     w = maps.maps.dim(3);
  for (std::int64_t e = 0; e < e_attn; ++e) {
    Tensor tile({h, f * w});
    for (std::int64_t fi = 0; fi < f; ++fi)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          tile.at(y, fi * w + x) = maps.maps[((e * f + fi) * h + y) * w + x];
    std::ostringstream name;
    name << "attr_" << e << ".pgm";
    write_pgm(dir / name.str(), tile);
  }
}

void save_invert_csv(const std::filesystem::path& path, const InvertResult& result) {
  std::ofstream out = open_out(path);
  out << "changed_fraction,l2\n";
  out << fmt9(result.changed_fraction) << "," << fmt9(result.l2) << "\n";
  require(out.good(), "analysis: csv write failed for " + path.string());
}

}  // namespace prophy::analysis
