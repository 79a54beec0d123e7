// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>

#include "prophy/synthdata.hpp"
#include "prophy/tensor.hpp"

namespace prophy::annot {

/// Recorded attention from a video-language model: layers x answer tokens x
/// video tokens, plus the VLM-side token grid the video axis flattens.
struct RawAttentionRecord {
  enum class Kind { phenomenon, background };

  Tensor a;  // [N_vlm, S_a, S_v]
  int grid_f = 0;
  int grid_h = 0;
  int grid_w = 0;
  Kind kind = Kind::background;
  int attribute = -1;  // annotated attribute id when kind == phenomenon
};

/// Phenomenon-minus-background attention over the VLM grid.
struct DiffAttentionMap {
  Tensor d;  // [F', H', W']
  int attribute = -1;
};

/// Token-level alignment targets at generator latent resolution.
struct AlignmentTarget {
  Tensor q_r;  // [N, E_attn]
};

/// Binary supervision mask; columns outside `marked` are all zero.
struct AlignmentMask {
  Tensor m;  // [N, E_attn]
  std::set<int> marked;
};

/// Mean over answer tokens, then over layers; returns [S_v].
Tensor average_attention(const RawAttentionRecord& rec);

/// Row-major reshape [S_v] -> [f, h, w]; frame-major, then rows, then cols.
Tensor reshape_to_grid(const Tensor& flat, int f, int h, int w);

/// Elementwise phenomenon - background (or the reverse when flip is set,
/// for replication against sources that state the opposite direction).
DiffAttentionMap diff_map(const Tensor& phenom, const Tensor& background, int attribute,
                          bool flip = false);

/// Separable cubic interpolation of a [F', H', W'] map onto the target grid
/// (align-corners, Catmull-Rom), followed by truncated Gaussian smoothing of
/// width sigma target cells (sigma = 0 disables smoothing). Returns the
/// flattened [tf * th * tw] map.
Tensor upsample_to_latent(const Tensor& grid_map, int tf, int th, int tw, double sigma = 0.5);

/// Assembles Q_r [n, e_attn]: column e copied from maps[e], zero elsewhere.
AlignmentTarget build_targets(const std::map<int, Tensor>& maps, std::int64_t n,
                              std::int64_t e_attn);

/// Mask rule: start from marked columns, keep entries with Q_r > 0, then per
/// attribute keep only the ceil(cap_fraction * N) largest values (ties go to
/// the lowest token index).
AlignmentMask build_mask(const Tensor& q_r, const std::set<int>& marked,
                         double cap_fraction = 0.10);

/// Desk-scale stand-in for the VLM: targets are the generator ground-truth
/// token occupancy of each active phenomenon, masks follow build_mask.
std::pair<AlignmentTarget, AlignmentMask> synthetic_oracle_targets(
    const synth::SyntheticSample& sample, double cap_fraction = 0.10);

/// Attention-record containers (arrays stored as 32-bit floats).
void save_record(const std::string& dir, const RawAttentionRecord& rec);
RawAttentionRecord load_record(const std::string& dir);

/// Targets and masks in the same container style, arrays `q_r` and `mask`.
void save_alignment(const std::string& dir, const AlignmentTarget& target,
                    const AlignmentMask& mask);
std::pair<AlignmentTarget, AlignmentMask> load_alignment(const std::string& dir);

}  // namespace prophy::annot
