// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "prophy/rng.hpp"
#include "prophy/tape.hpp"
#include "prophy/tensor.hpp"

namespace prophy::model {

/// Mini latent flow-matching transformer plus Physical Branch attachment.
struct BackboneConfig {
  int depth = 4;     // L backbone blocks
  int channels = 64; // C
  int heads = 4;
  int grid_f = 4;    // token grid; N = grid_f * grid_h * grid_w
  int grid_h = 8;
  int grid_w = 8;
  int r_f = 2;       // pixel patch strides the grid was produced with
  int r_s = 4;
  int text_dim = 32;
  int vocab = 16;
  std::vector<int> pb_indices = {0, 2};  // backbone blocks mirrored as PBs
  int e_s = 32;
  int e_r = 32;
  int top_k = 4;
  int e_attn = 5;      // attribute slots (toy taxonomy)
  int categories = 5;  // category-head output dim (toy taxonomy)
  bool train_backbone = false;

  std::int64_t tokens() const {
    return static_cast<std::int64_t>(grid_f) * grid_h * grid_w;
  }
  int sem_hidden() const { return 4 * e_s; }
  void validate() const;
};

/// Ordered named parameter arrays with per-array trainability.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value, bool trainable);
  bool has(const std::string& name) const { return values_.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  bool trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);
  const std::vector<std::string>& names() const { return order_; }
  std::vector<std::string> trainable_names() const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor> values_;
  std::map<std::string, bool> trainable_;
};

/// One denoising query for a single sample.
struct DenoiserInput {
  Tensor x_t;  // [N, C]
  double t = 0.5;
  std::vector<int> caption;
  bool cfg_null = false;
  bool invert_refinement = false;
};

/// A batch laid out as stacked token rows.
struct BatchInput {
  Tensor x_t;                              // [B*N, C]
  std::vector<double> t;                   // [B]
  std::vector<std::vector<int>> captions;  // [B]
  std::vector<std::uint8_t> use_null;      // [B], 1 = null conditioning
  bool invert_refinement = false;
};

/// Tape handles for everything the losses and the analysis tools consume.
struct ForwardHandles {
  ad::Val velocity;    // [B*N, C]
  ad::Val sem_logits;  // [B, E_s] pre-softmax semantic router logits
  ad::Val rho_p;       // [B, E_s]
  ad::Val cat_vec;     // [B, categories] linear-mapped routing vector
  ad::Val rho_r;       // [B*N, E_r] full refinement distribution per token
  ad::Val attr_map;    // [B*N, E_attn]
  std::vector<std::int32_t> expert_slots;  // [B*N*top_k] selected experts
  std::map<std::string, ad::Val> leaves;   // param name -> tape leaf
};

/// Sinusoidal features of a scalar time in [0, 1]; dim must be even.
Tensor time_features(double t, int dim);

/// Registers freshly initialized backbone arrays ("backbone.*") in `store`.
void init_backbone_params(ParamStore& store, const BackboneConfig& config, Rng& rng);

/// Registers the Physical Branch ("branch.*"): PB blocks copied bitwise from
/// the indexed backbone blocks, injection projections at exactly zero, and
/// freshly initialized SEB / REB / head arrays.
void init_physical_branch(ParamStore& store, const BackboneConfig& config, Rng& rng);

class Denoiser {
 public:
  Denoiser(BackboneConfig config, ParamStore params);

  /// Random backbone + branch initialization, seeded.
  static Denoiser init(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Builds the forward graph for a batch on the given tape. Trainable
  /// arrays mount as differentiable leaves, frozen arrays as constants.
  ForwardHandles build(ad::Tape& tape, const BatchInput& in) const;

  /// Plain single-sample forward; returns the predicted velocity [N, C].
  Tensor forward(const DenoiserInput& in) const;

  /// Rectified-flow objective at one (x0, noise, t):
  /// mean square of forward((1-t) noise + t x0, t) - (x0 - noise).
  double flow_loss(const Tensor& x0, const Tensor& noise, double t,
                   const std::vector<int>& caption, bool cfg_null = false) const;

  /// Euler integration of the velocity field from seeded noise, with
  /// classifier-free guidance (scale 1 degenerates to the conditional pass).
  Tensor sample(const std::vector<int>& caption, int steps, std::uint64_t seed,
                double guidance_scale, bool invert_refinement = false) const;

  /// Mean caption-token embedding, or the learned null row: plain [D_text].
  Tensor text_embedding(const std::vector<int>& caption, bool use_null) const;

 private:
  BackboneConfig config_;
  ParamStore params_;
};

}  // namespace prophy::model
