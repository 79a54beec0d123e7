// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "prophy/tensor.hpp"

namespace prophy::tax {

enum class MacroGroup { dynamics, thermodynamics, optics, appearance, other };
enum class AttributeKind { phenomenon, appearance };

std::string macro_group_name(MacroGroup g);
MacroGroup macro_group_from(const std::string& s);

struct PhysicalCategory {
  int id = 0;
  std::string name;
  MacroGroup group = MacroGroup::other;
};

/// Attributes are the categories kept for fine-grained alignment: every
/// category outside the `other` (absence placeholder) group, re-indexed
/// densely in category order.
struct PhysicalAttribute {
  int id = 0;
  std::string name;
  AttributeKind kind = AttributeKind::phenomenon;
  int category_id = 0;
};

struct CategoryVector {
  Tensor q_s;  // [E_wisa], entries in {0,1}
};

struct Taxonomy {
  std::vector<PhysicalCategory> categories;
  std::vector<PhysicalAttribute> attributes;

  int category_count() const { return static_cast<int>(categories.size()); }
  int attribute_count() const { return static_cast<int>(attributes.size()); }

  CategoryVector category_vector(const std::set<int>& labels) const;
  std::optional<int> attribute_for_category(int category_id) const;
  const PhysicalCategory& category(int id) const;
};

Taxonomy parse_taxonomy(const std::string& text);
Taxonomy load_taxonomy(const std::filesystem::path& definition_file);
std::string serialize_taxonomy(const Taxonomy& t);

/// Bundled full-scale taxonomy: 29 categories, 23 attributes.
const Taxonomy& builtin_full();
/// Bundled toy taxonomy used by the synthetic generator: 5 categories,
/// all retained as attributes.
const Taxonomy& builtin_toy();

}  // namespace prophy::tax
