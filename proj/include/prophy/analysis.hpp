// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prophy/backbone.hpp"
#include "prophy/synthdata.hpp"
#include "prophy/tensor.hpp"

namespace prophy::analysis {

/// Semantic-router logits with one category label per row.
struct LogitCollection {
  Tensor rows;              // [M, E]
  std::vector<int> labels;  // [M]
  std::vector<int> groups;  // distinct labels in collection order
};

/// Pre-softmax semantic router logits for one caption.
Tensor semantic_logits(const model::Denoiser& d, const std::vector<int>& caption);

/// Random caption for a category: its phenomenon token at a random position,
/// filler elsewhere. The toy taxonomy maps categories and phenomena 1:1.
std::vector<int> category_prompt(int category, Rng& rng);

/// per_group random prompts per listed category, routed through the model.
LogitCollection collect_semantic_logits(const model::Denoiser& d,
                                        const std::vector<int>& categories, int per_group,
                                        std::uint64_t seed);

/// Pearson correlation between per-group mean logit vectors. Pairs where a
/// mean vector has zero variance across its components are flagged undefined
/// (r stored as 0); the diagonal is 1 by definition.
struct PearsonResult {
  Tensor r;                           // [G, G]
  std::vector<std::uint8_t> defined;  // [G*G]
  std::vector<int> groups;

  bool pair_defined(int i, int j) const {
    return defined[static_cast<std::size_t>(i) * groups.size() +
                   static_cast<std::size_t>(j)] != 0;
  }
};

PearsonResult pearson_matrix(const LogitCollection& coll);

/// Principal components of the centered rows. Ratios are eigenvalue shares,
/// descending; components beyond the data rank are zero with ratio 0. Each
/// component's largest-magnitude loading is made positive.
struct PcaResult {
  Tensor projected;            // [M, dims]
  Tensor components;           // [dims, E]
  std::vector<double> ratios;  // [dims]
};

PcaResult pca_project(const LogitCollection& coll, int dims = 2);

/// Refinement-router views of one latent state: raw distributions and the
/// projection-head maps reshaped onto the token grid.
struct ActivationMaps {
  Tensor rho_r;  // [N, E_r]
  Tensor attr;   // [N, E_attn]
  Tensor maps;   // [E_attn, F', H', W']
};

ActivationMaps expert_activation_maps(const model::Denoiser& d, const Tensor& x_t, double t,
                                      const std::vector<int>& caption);

/// Training-style probe state (1 - t) * noise + t * latent with seeded noise.
Tensor probe_state(const Tensor& latent, double t, std::uint64_t seed);

/// Paired generations with the refinement logits negated on the second run.
/// The changed fraction compares top-k sets at the shared initial noise.
struct InvertResult {
  Tensor normal;    // [N, C]
  Tensor inverted;  // [N, C]
  double changed_fraction = 0.0;
  double l2 = 0.0;
};

InvertResult invert_experiment(const model::Denoiser& d, const std::vector<int>& caption,
                               int steps, std::uint64_t seed, double guidance = 1.0);

/// Binary 8-bit PGM, min-max normalized; a constant image maps to mid-gray.
void write_pgm(const std::filesystem::path& path, const Tensor& image);

/// CSV emission, header row plus 9-significant-digit values.
void save_pearson_csv(const std::filesystem::path& path, const PearsonResult& result);
void save_pca_csv(const std::filesystem::path& path, const PcaResult& result,
                  const std::vector<int>& labels);
void save_maps(const std::filesystem::path& dir, const ActivationMaps& maps);
void save_invert_csv(const std::filesystem::path& path, const InvertResult& result);

}  // namespace prophy::analysis
