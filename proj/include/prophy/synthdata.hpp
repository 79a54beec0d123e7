// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prophy/rng.hpp"
#include "prophy/taxonomy.hpp"
#include "prophy/tensor.hpp"

namespace prophy::synth {

/// Pixel-space clip geometry plus the patch strides that define the token grid.
struct VideoGeometry {
  int frames = 8;
  int height = 32;
  int width = 32;
  int r_f = 2;
  int r_s = 4;

  int grid_f() const { return frames / r_f; }
  int grid_h() const { return height / r_s; }
  int grid_w() const { return width / r_s; }
  std::int64_t tokens() const {
    return static_cast<std::int64_t>(grid_f()) * grid_h() * grid_w();
  }
};

/// Toy phenomenon kinds, each tied to one toy-taxonomy category.
enum class Phenomenon { bounce, diffuse, flash, slide, drip };

constexpr int kPhenomenonKinds = 5;

/// Toy-taxonomy category id (and attribute id) for a phenomenon kind.
int category_for(Phenomenon kind);
const char* phenomenon_name(Phenomenon kind);
Phenomenon phenomenon_from_name(const std::string& name);

/// Pixel rectangle rows [y0, y0+h) x cols [x0, x0+w).
struct Region {
  int y0 = 0;
  int x0 = 0;
  int h = 0;
  int w = 0;

  bool contains(double y, double x) const {
    return y >= y0 && y < y0 + h && x >= x0 && x < x0 + w;
  }
};

/// One scripted phenomenon: analytic dynamics inside a region.
///   bounce  - disc reflecting elastically off the region walls
///   diffuse - disc whose radius grows as sqrt(1 + p0 * t)
///   flash   - region-wide brightness transient peaking at frame p0, width p1
///   slide   - square block translating at constant velocity
///   drip    - disc falling under constant acceleration p0
struct PhenomenonSpec {
  Phenomenon kind = Phenomenon::bounce;
  Region region;
  double py = 0.0;  // initial centre, pixels
  double px = 0.0;
  double vy = 0.0;  // velocity, pixels per frame
  double vx = 0.0;
  double radius = 2.0;
  double p0 = 0.0;  // kind-specific parameter (see above)
  double p1 = 1.0;
};

/// Brightness contributed by one phenomenon at pixel (f, y, x); zero outside
/// its footprint. Shared by the renderer and the token ground truth.
double footprint_intensity(const PhenomenonSpec& spec, int f, double y, double x);

/// One generated clip with every ground-truth channel the trainer needs.
struct SyntheticSample {
  Tensor frames;                     // [F, H, W], values in [0, 1]
  Tensor latent;                     // [N, C]
  tax::CategoryVector q_s;      // over the toy taxonomy
  Tensor token_masks;                // [N, E_attn] binary
  std::vector<int> caption;          // kCaptionLen token ids
  std::uint64_t seed = 0;
  std::vector<PhenomenonSpec> specs;
  VideoGeometry geom;
};

constexpr int kMaxSpecs = 3;
constexpr int kCaptionLen = 4;
constexpr int kFillerToken = 0;
constexpr int kVocabSize = 16;

/// Caption token for a phenomenon kind (filler token 0 pads the rest).
int caption_token(Phenomenon kind);

/// Non-overlapping patch pooling followed by a fixed seeded linear lift.
/// Each patch is averaged over its r_f frames, keeping the r_s x r_s spatial
/// cells, and the resulting descriptor is mapped to `channels` dims.
Tensor encode(const Tensor& frames, const VideoGeometry& geom, int channels,
              std::uint64_t lift_seed);

/// The [channels, r_s * r_s] lift matrix used by encode.
Tensor lift_matrix(const VideoGeometry& geom, int channels, std::uint64_t lift_seed);

/// Renders the specs over a textured background; deterministic given seed.
SyntheticSample generate_sample(std::uint64_t seed, const std::vector<PhenomenonSpec>& specs,
                                const VideoGeometry& geom, int channels,
                                std::uint64_t lift_seed);

/// Fraction of each token's pixel footprint covered by each attribute's
/// phenomena: [N, E_attn] with entries in [0, 1]. token_masks = (occupancy > 0).
Tensor token_occupancy(const SyntheticSample& sample);

/// Draws a random in-bounds spec of the given kind.
PhenomenonSpec random_spec(Rng& rng, Phenomenon kind, const VideoGeometry& geom);

/// Corpus generation: one uniformly chosen phenomenon per sample.
struct CorpusConfig {
  int size = 64;
  std::uint64_t seed = 1;
  VideoGeometry geom;
  int channels = 64;
  std::uint64_t lift_seed = 7;
};

/// Generates config.size samples; sample i uses derive_seed(config.seed, i).
std::vector<SyntheticSample> generate_corpus(const CorpusConfig& config);

/// Writes samples as container subdirectories plus an `index.json` listing
/// seeds and specs; load_corpus restores latents and ground truth bitwise.
void save_corpus(const std::string& dir, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> load_corpus(const std::string& dir);

}  // namespace prophy::synth
