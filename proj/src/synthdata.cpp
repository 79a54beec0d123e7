// SPDX-License-Identifier: Apache-2.0
#include "prophy/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "prophy/container.hpp"
#include "prophy/linalg.hpp"

namespace prophy::synth {

namespace fs = std::filesystem;
using nlohmann::json;

int category_for(Phenomenon kind) {
  switch (kind) {
    case Phenomenon::bounce: return 0;   // collision
    case Phenomenon::diffuse: return 1;  // gas motion
    case Phenomenon::flash: return 2;    // combustion
    case Phenomenon::slide: return 3;    // rigid body motion
    case Phenomenon::drip: return 4;     // liquid motion
  }
  throw Error("synth: unknown phenomenon kind");
}

const char* phenomenon_name(Phenomenon kind) {
  switch (kind) {
    case Phenomenon::bounce: return "bounce";
    case Phenomenon::diffuse: return "diffuse";
    case Phenomenon::flash: return "flash";
    case Phenomenon::slide: return "slide";
    case Phenomenon::drip: return "drip";
  }
  throw Error("synth: unknown phenomenon kind");
}

Phenomenon phenomenon_from_name(const std::string& name) {
  for (int k = 0; k < kPhenomenonKinds; ++k) {
    auto kind = static_cast<Phenomenon>(k);
    if (name == phenomenon_name(kind)) return kind;
  }
  throw Error("synth: unknown phenomenon name '" + name + "'");
}

int caption_token(Phenomenon kind) { return 1 + static_cast<int>(kind); }

namespace {

double amplitude(Phenomenon kind) {
  switch (kind) {
    case Phenomenon::bounce: return 0.8;
    case Phenomenon::diffuse: return 0.9;
    case Phenomenon::flash: return 0.9;
    case Phenomenon::slide: return 0.7;
    case Phenomenon::drip: return 0.75;
  }
  return 0.0;
}

/// Position of a point moving at constant speed between elastic walls.
double reflect(double p, double lo, double hi) {
  if (hi <= lo) return 0.5 * (lo + hi);
  double period = 2.0 * (hi - lo);
  double ph = std::fmod(p - lo, period);
  if (ph < 0.0) ph += period;
  return lo + std::min(ph, period - ph);
}

double disc(double dy, double dx, double radius) {
  if (radius <= 0.0) return 0.0;
  double d2 = (dy * dy + dx * dx) / (radius * radius);
  return std::max(0.0, 1.0 - d2);
}

void validate_spec(const PhenomenonSpec& spec, const VideoGeometry& geom) {
  const Region& r = spec.region;
  require(r.h > 0 && r.w > 0, "synth: region must have positive extent");
  require(r.y0 >= 0 && r.x0 >= 0 && r.y0 + r.h <= geom.height && r.x0 + r.w <= geom.width,
          "synth: region outside frame bounds");
  require(spec.radius > 0.0, "synth: radius must be positive");
  if (spec.kind == Phenomenon::flash)
    require(spec.p1 > 0.0, "synth: flash width must be positive");
}

void validate_geometry(const VideoGeometry& geom) {
  require(geom.frames > 0 && geom.height > 0 && geom.width > 0,
          "synth: frame dims must be positive");
  require(geom.r_f > 0 && geom.r_s > 0, "synth: patch strides must be positive");
  require(geom.frames % geom.r_f == 0, "synth: frames not divisible by r_f");
  require(geom.height % geom.r_s == 0, "synth: height not divisible by r_s");
  require(geom.width % geom.r_s == 0, "synth: width not divisible by r_s");
}

}  // namespace

double footprint_intensity(const PhenomenonSpec& spec, int f, double y, double x) {
  const Region& r = spec.region;
  if (!r.contains(y, x)) return 0.0;
  double t = static_cast<double>(f);
  double amp = amplitude(spec.kind);
  switch (spec.kind) {
    case Phenomenon::bounce: {
      double cy = reflect(spec.py + spec.vy * t, r.y0 + spec.radius, r.y0 + r.h - spec.radius);
      double cx = reflect(spec.px + spec.vx * t, r.x0 + spec.radius, r.x0 + r.w - spec.radius);
      return amp * disc(y - cy, x - cx, spec.radius);
    }
    case Phenomenon::diffuse: {
      double rt = spec.radius * std::sqrt(1.0 + spec.p0 * t);
      return amp * disc(y - spec.py, x - spec.px, rt);
    }
    case Phenomenon::flash: {
      double env = std::max(0.0, 1.0 - std::abs(t - spec.p0) / spec.p1);
      return amp * env;
    }
    case Phenomenon::slide: {
      double cy = spec.py + spec.vy * t;
      double cx = spec.px + spec.vx * t;
      bool inside = std::abs(y - cy) <= spec.radius && std::abs(x - cx) <= spec.radius;
      return inside ? amp : 0.0;
    }
    case Phenomenon::drip: {
      double cy = spec.py + spec.vy * t + 0.5 * spec.p0 * t * t;
      double cx = spec.px + spec.vx * t;
      return amp * disc(y - cy, x - cx, spec.radius);
    }
  }
  return 0.0;
}

Tensor lift_matrix(const VideoGeometry& geom, int channels, std::uint64_t lift_seed) {
  validate_geometry(geom);
  require(channels > 0, "synth: channels must be positive");
  int d = geom.r_s * geom.r_s;
  Tensor w({channels, d});
  Rng rng(derive_seed(lift_seed, "encode.lift"));
  rng.fill_normal(w, 0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  return w;
}

Tensor encode(const Tensor& frames, const VideoGeometry& geom, int channels,
              std::uint64_t lift_seed) {
  validate_geometry(geom);
  require(frames.ndim() == 3 && frames.dim(0) == geom.frames && frames.dim(1) == geom.height &&
              frames.dim(2) == geom.width,
          "synth: frames shape does not match geometry");
  int d = geom.r_s * geom.r_s;
  Tensor w = lift_matrix(geom, channels, lift_seed);
  Tensor desc({geom.tokens(), d});
  std::int64_t token = 0;
  for (int fi = 0; fi < geom.grid_f(); ++fi)
    for (int yi = 0; yi < geom.grid_h(); ++yi)
      for (int xi = 0; xi < geom.grid_w(); ++xi, ++token)
        for (int yy = 0; yy < geom.r_s; ++yy)
          for (int xx = 0; xx < geom.r_s; ++xx) {
            double sum = 0.0;
            for (int ff = 0; ff < geom.r_f; ++ff)
              sum += frames.at(fi * geom.r_f + ff, yi * geom.r_s + yy, xi * geom.r_s + xx);
            desc.at(token, yy * geom.r_s + xx) = sum / geom.r_f;
          }
  Tensor out({geom.tokens(), channels});
  linalg::as_mat(out) = linalg::as_mat(desc) * linalg::as_mat(w).transpose();
  return out;
}

SyntheticSample generate_sample(std::uint64_t seed, const std::vector<PhenomenonSpec>& specs,
                                const VideoGeometry& geom, int channels,
                                std::uint64_t lift_seed) {
  validate_geometry(geom);
  require(static_cast<int>(specs.size()) <= kMaxSpecs, "synth: too many specs");
  for (const auto& s : specs) validate_spec(s, geom);

  SyntheticSample sample;
  sample.seed = seed;
  sample.specs = specs;
  sample.geom = geom;

  Rng bg(derive_seed(seed, "background"));
  sample.frames = Tensor({geom.frames, geom.height, geom.width});
  for (int f = 0; f < geom.frames; ++f)
    for (int y = 0; y < geom.height; ++y)
      for (int x = 0; x < geom.width; ++x) {
        double base = 0.15 + 0.08 * static_cast<double>(y + x) / (geom.height + geom.width);
        double v = base + bg.uniform(0.0, 0.05);
        for (const auto& s : specs) v += footprint_intensity(s, f, y + 0.5, x + 0.5);
        sample.frames.at(f, y, x) = std::clamp(v, 0.0, 1.0);
      }

  sample.latent = encode(sample.frames, geom, channels, lift_seed);

  const tax::Taxonomy& toy = tax::builtin_toy();
  std::set<int> active;
  for (const auto& s : specs) active.insert(category_for(s.kind));
  sample.q_s = toy.category_vector(active);

  std::int64_t n = geom.tokens();
  std::int64_t e_attn = toy.attribute_count();
  sample.token_masks = Tensor({n, e_attn});
  std::int64_t token = 0;
  for (int fi = 0; fi < geom.grid_f(); ++fi)
    for (int yi = 0; yi < geom.grid_h(); ++yi)
      for (int xi = 0; xi < geom.grid_w(); ++xi, ++token)
        for (const auto& s : specs) {
          int attr = category_for(s.kind);
          if (sample.token_masks.at(token, attr) > 0.0) continue;
          bool hit = false;
          for (int ff = 0; ff < geom.r_f && !hit; ++ff)
            for (int yy = 0; yy < geom.r_s && !hit; ++yy)
              for (int xx = 0; xx < geom.r_s && !hit; ++xx)
                hit = footprint_intensity(s, fi * geom.r_f + ff, yi * geom.r_s + yy + 0.5,
                                          xi * geom.r_s + xx + 0.5) > 0.0;
          if (hit) sample.token_masks.at(token, attr) = 1.0;
        }

  sample.caption.assign(kCaptionLen, kFillerToken);
  require(static_cast<int>(specs.size()) <= kCaptionLen, "synth: caption too short for specs");
  for (std::size_t i = 0; i < specs.size(); ++i) sample.caption[i] = caption_token(specs[i].kind);

  return sample;
}

Tensor token_occupancy(const SyntheticSample& sample) {
  const VideoGeometry& geom = sample.geom;
  validate_geometry(geom);
  const tax::Taxonomy& toy = tax::builtin_toy();
  std::int64_t e_attn = toy.attribute_count();
  Tensor occ({geom.tokens(), e_attn});
  double patch = static_cast<double>(geom.r_f) * geom.r_s * geom.r_s;
  std::int64_t token = 0;
  for (int fi = 0; fi < geom.grid_f(); ++fi)
    for (int yi = 0; yi < geom.grid_h(); ++yi)
      for (int xi = 0; xi < geom.grid_w(); ++xi, ++token)
        for (int ff = 0; ff < geom.r_f; ++ff)
          for (int yy = 0; yy < geom.r_s; ++yy)
            for (int xx = 0; xx < geom.r_s; ++xx)
              for (int attr = 0; attr < e_attn; ++attr) {
                double v = 0.0;
                for (const auto& s : sample.specs) {
                  if (category_for(s.kind) != attr) continue;
                  v = std::max(v, footprint_intensity(s, fi * geom.r_f + ff,
                                                      yi * geom.r_s + yy + 0.5,
                                                      xi * geom.r_s + xx + 0.5));
                }
                if (v > 0.0) occ.at(token, attr) += 1.0 / patch;
              }
  return occ;
}

PhenomenonSpec random_spec(Rng& rng, Phenomenon kind, const VideoGeometry& geom) {
  validate_geometry(geom);
  PhenomenonSpec spec;
  spec.kind = kind;
  int max_h = std::min(geom.height, 24);
  int max_w = std::min(geom.width, 24);
  int min_h = std::min(12, max_h);
  int min_w = std::min(12, max_w);
  spec.region.h = min_h + static_cast<int>(rng.uniform_int(max_h - min_h + 1));
  spec.region.w = min_w + static_cast<int>(rng.uniform_int(max_w - min_w + 1));
  spec.region.y0 = static_cast<int>(rng.uniform_int(geom.height - spec.region.h + 1));
  spec.region.x0 = static_cast<int>(rng.uniform_int(geom.width - spec.region.w + 1));
  const Region& r = spec.region;

  auto signed_speed = [&](double lo, double hi) {
    double s = rng.uniform(lo, hi);
    return rng.uniform() < 0.5 ? -s : s;
  };

  spec.radius = rng.uniform(2.0, 3.5);
  spec.py = rng.uniform(r.y0 + spec.radius, r.y0 + r.h - spec.radius);
  spec.px = rng.uniform(r.x0 + spec.radius, r.x0 + r.w - spec.radius);
  switch (kind) {
    case Phenomenon::bounce:
      spec.radius = rng.uniform(2.8, 4.2);
      spec.vy = signed_speed(0.8, 2.0);
      spec.vx = signed_speed(0.8, 2.0);
      break;
    case Phenomenon::diffuse:
      spec.radius = rng.uniform(1.5, 2.5);
      spec.p0 = rng.uniform(0.5, 1.5);
      break;
    case Phenomenon::flash:
      spec.p0 = rng.uniform(1.0, geom.frames - 2.0);
      spec.p1 = rng.uniform(1.0, 2.5);
      break;
    case Phenomenon::slide:
      spec.radius = rng.uniform(3.0, 5.0);
      spec.vy = signed_speed(1.0, 2.2);
      spec.vx = signed_speed(1.0, 2.2);
      break;
    case Phenomenon::drip:
      spec.py = r.y0 + spec.radius + rng.uniform(0.0, 2.0);
      spec.vy = rng.uniform(0.0, 0.5);
      spec.vx = 0.0;
      spec.p0 = rng.uniform(0.2, 0.6);
      break;
  }
  return spec;
}

std::vector<SyntheticSample> generate_corpus(const CorpusConfig& config) {
  require(config.size > 0, "synth: corpus size must be positive");
  Rng spec_rng(derive_seed(config.seed, "corpus.specs"));
  std::vector<SyntheticSample> samples;
  samples.reserve(config.size);
  for (int i = 0; i < config.size; ++i) {
    auto kind = static_cast<Phenomenon>(spec_rng.uniform_int(kPhenomenonKinds));
    PhenomenonSpec spec = random_spec(spec_rng, kind, config.geom);
    std::uint64_t seed = derive_seed(config.seed, "sample." + std::to_string(i));
    samples.push_back(
        generate_sample(seed, {spec}, config.geom, config.channels, config.lift_seed));
  }
  return samples;
}

namespace {

json spec_to_json(const PhenomenonSpec& s) {
  return json{{"kind", phenomenon_name(s.kind)},
              {"region", {s.region.y0, s.region.x0, s.region.h, s.region.w}},
              {"py", s.py},
              {"px", s.px},
              {"vy", s.vy},
              {"vx", s.vx},
              {"radius", s.radius},
              {"p0", s.p0},
              {"p1", s.p1}};
}

PhenomenonSpec spec_from_json(const json& j) {
  PhenomenonSpec s;
  s.kind = phenomenon_from_name(j.at("kind").get<std::string>());
  auto r = j.at("region");
  require(r.is_array() && r.size() == 4, "synth: region must be [y0, x0, h, w]");
  s.region = {r[0].get<int>(), r[1].get<int>(), r[2].get<int>(), r[3].get<int>()};
  s.py = j.at("py").get<double>();
  s.px = j.at("px").get<double>();
  s.vy = j.at("vy").get<double>();
  s.vx = j.at("vx").get<double>();
  s.radius = j.at("radius").get<double>();
  s.p0 = j.at("p0").get<double>();
  s.p1 = j.at("p1").get<double>();
  return s;
}

std::string sample_dir_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%05d", i);
  return buf;
}

}  // namespace

void save_corpus(const std::string& dir, const std::vector<SyntheticSample>& samples) {
  require(!samples.empty(), "synth: nothing to save");
  fs::create_directories(dir);
  json index;
  index["format"] = "prophy-corpus";
  index["version"] = 1;
  const VideoGeometry& g = samples.front().geom;
  index["geometry"] = {{"frames", g.frames}, {"height", g.height}, {"width", g.width},
                       {"r_f", g.r_f},       {"r_s", g.r_s}};
  index["samples"] = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SyntheticSample& s = samples[i];
    require(s.geom.frames == g.frames && s.geom.height == g.height && s.geom.width == g.width &&
                s.geom.r_f == g.r_f && s.geom.r_s == g.r_s,
            "synth: mixed geometries in one corpus");
    json entry;
    entry["dir"] = sample_dir_name(static_cast<int>(i));
    entry["seed"] = s.seed;
    entry["specs"] = json::array();
    for (const auto& sp : s.specs) entry["specs"].push_back(spec_to_json(sp));
    index["samples"].push_back(entry);

    io::Container c;
    c.set_meta("seed", std::to_string(s.seed));
    c.add("frames", s.frames, io::DType::f64);
    c.add("latent", s.latent, io::DType::f64);
    c.add("q_s", s.q_s.q_s, io::DType::f64);
    std::vector<std::int32_t> masks(s.token_masks.numel());
    for (std::int64_t k = 0; k < s.token_masks.numel(); ++k)
      masks[k] = static_cast<std::int32_t>(s.token_masks[k]);
    c.add_i32("token_masks", masks, s.token_masks.shape());
    std::vector<std::int32_t> cap(s.caption.begin(), s.caption.end());
    c.add_i32("caption", cap, {static_cast<std::int64_t>(s.caption.size())});
    c.save((fs::path(dir) / sample_dir_name(static_cast<int>(i))).string());
  }
  std::ofstream out(fs::path(dir) / "index.json");
  require(static_cast<bool>(out), "synth: cannot write corpus index");
  out << index.dump(2) << "\n";
}

std::vector<SyntheticSample> load_corpus(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "index.json");
  require(static_cast<bool>(in), "synth: missing corpus index in " + dir);
  json index;
  try {
    in >> index;
  } catch (const std::exception& e) {
    throw Error(std::string("synth: bad corpus index: ") + e.what());
  }
  require(index.value("format", "") == "prophy-corpus", "synth: not a corpus index");
  auto gj = index.at("geometry");
  VideoGeometry geom;
  geom.frames = gj.at("frames").get<int>();
  geom.height = gj.at("height").get<int>();
  geom.width = gj.at("width").get<int>();
  geom.r_f = gj.at("r_f").get<int>();
  geom.r_s = gj.at("r_s").get<int>();
  validate_geometry(geom);

  const tax::Taxonomy& toy = tax::builtin_toy();
  std::vector<SyntheticSample> samples;
  for (const auto& entry : index.at("samples")) {
    io::Container c = io::Container::load(
        (fs::path(dir) / entry.at("dir").get<std::string>()).string());
    SyntheticSample s;
    s.geom = geom;
    s.seed = entry.at("seed").get<std::uint64_t>();
    for (const auto& sj : entry.at("specs")) s.specs.push_back(spec_from_json(sj));
    for (const auto& sp : s.specs) validate_spec(sp, geom);
    s.frames = c.tensor("frames");
    s.latent = c.tensor("latent");
    s.q_s = tax::CategoryVector{c.tensor("q_s")};
    require(s.q_s.q_s.numel() == toy.category_count(), "synth: q_s length mismatch");
    s.token_masks = c.tensor("token_masks");
    Tensor cap = c.tensor("caption");
    s.caption.resize(cap.numel());
    for (std::int64_t k = 0; k < cap.numel(); ++k) s.caption[k] = static_cast<int>(cap[k]);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace prophy::synth
