// SPDX-License-Identifier: Apache-2.0
#include "prophy/taxonomy.hpp"

#include <fstream>
#include <sstream>

namespace prophy::tax {

namespace {

// 17 phenomena, 6 appearances, 6 absence placeholders. The absence rows are
// excluded from fine-grained alignment; only the first of them has a name
// stated verbatim upstream, the rest are local placeholders.
constexpr const char* kFullTaxonomy =
    "0\trigid body motion\tdynamics\n"
    "1\tcollision\tdynamics\n"
    "2\tliquid motion\tdynamics\n"
    "3\tgas motion\tdynamics\n"
    "4\telastic motion\tdynamics\n"
    "5\tdeformation\tdynamics\n"
    "6\tmelting\tthermodynamics\n"
    "7\tsolidification\tthermodynamics\n"
    "8\tvaporization\tthermodynamics\n"
    "9\tliquefaction\tthermodynamics\n"
    "10\tcombustion\tthermodynamics\n"
    "11\texplosion\tthermodynamics\n"
    "12\treflection\toptics\n"
    "13\trefraction\toptics\n"
    "14\tscattering\toptics\n"
    "15\tinterference and diffraction\toptics\n"
    "16\tunnatural light source\toptics\n"
    "17\tliquid objects\tappearance\n"
    "18\tsolid objects\tappearance\n"
    "19\tgas objects\tappearance\n"
    "20\tobject decomposition and splitting\tappearance\n"
    "21\tmixing of multiple objects\tappearance\n"
    "22\tobject disappearance\tappearance\n"
    "23\tno obvious dynamic phenomenon\tother\n"
    "24\tno obvious thermodynamic phenomenon\tother\n"
    "25\tno obvious optical phenomenon\tother\n"
    "26\tno obvious appearance change\tother\n"
    "27\tstill scene\tother\n"
    "28\tunclassifiable phenomenon\tother\n";

constexpr const char* kToyTaxonomy =
    "0\tcollision\tdynamics\n"
    "1\tgas motion\tdynamics\n"
    "2\tcombustion\tthermodynamics\n"
    "3\trigid body motion\tdynamics\n"
    "4\tliquid motion\tdynamics\n";

}  // namespace

std::string macro_group_name(MacroGroup g) {
  switch (g) {
    case MacroGroup::dynamics: return "dynamics";
    case MacroGroup::thermodynamics: return "thermodynamics";
    case MacroGroup::optics: return "optics";
    case MacroGroup::appearance: return "appearance";
    case MacroGroup::other: return "other";
  }
  throw Error("taxonomy: unknown macro group");
}

MacroGroup macro_group_from(const std::string& s) {
  if (s == "dynamics") return MacroGroup::dynamics;
  if (s == "thermodynamics") return MacroGroup::thermodynamics;
  if (s == "optics") return MacroGroup::optics;
  if (s == "appearance") return MacroGroup::appearance;
  if (s == "other") return MacroGroup::other;
  throw Error("taxonomy: unknown macro group '" + s + "'");
}

CategoryVector Taxonomy::category_vector(const std::set<int>& labels) const {
  Tensor q({static_cast<std::int64_t>(categories.size())});
  for (int id : labels) {
    if (id < 0 || id >= category_count())
      throw Error("taxonomy: category id " + std::to_string(id) + " out of range [0, " +
                  std::to_string(category_count()) + ")");
    q[id] = 1.0;
  }
  return CategoryVector{std::move(q)};
}

std::optional<int> Taxonomy::attribute_for_category(int category_id) const {
  for (const auto& a : attributes)
    if (a.category_id == category_id) return a.id;
  return std::nullopt;
}

const PhysicalCategory& Taxonomy::category(int id) const {
  if (id < 0 || id >= category_count())
    throw Error("taxonomy: category id " + std::to_string(id) + " out of range");
  return categories[static_cast<std::size_t>(id)];
}

Taxonomy parse_taxonomy(const std::string& text) {
  Taxonomy t;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos)
      throw Error("taxonomy: line " + std::to_string(lineno) + " is not id<TAB>name<TAB>group");
    int id = 0;
    try {
      std::size_t used = 0;
      id = std::stoi(line.substr(0, tab1), &used);
      if (used != tab1) throw std::invalid_argument("trailing");
    } catch (...) {
      throw Error("taxonomy: line " + std::to_string(lineno) + " has a malformed id");
    }
    const std::string name = line.substr(tab1 + 1, tab2 - tab1 - 1);
    const std::string group = line.substr(tab2 + 1);
    if (name.empty())
      throw Error("taxonomy: line " + std::to_string(lineno) + " has an empty name");
    const int expected = static_cast<int>(t.categories.size());
    if (id != expected)
      throw Error("taxonomy: line " + std::to_string(lineno) + " has id " + std::to_string(id) +
                  ", expected dense ascending id " + std::to_string(expected));
    t.categories.push_back({id, name, macro_group_from(group)});
  }
  if (t.categories.empty()) throw Error("taxonomy: no categories defined");

  for (const auto& c : t.categories) {
    if (c.group == MacroGroup::other) continue;
    PhysicalAttribute a;
    a.id = static_cast<int>(t.attributes.size());
    a.name = c.name;
    a.kind = c.group == MacroGroup::appearance ? AttributeKind::appearance
                                               : AttributeKind::phenomenon;
    a.category_id = c.id;
    t.attributes.push_back(a);
  }
  if (t.attributes.empty()) throw Error("taxonomy: no alignment attributes defined");
  return t;
}

Taxonomy load_taxonomy(const std::filesystem::path& definition_file) {
  std::ifstream in(definition_file);
  if (!in.good()) throw Error("taxonomy: cannot open " + definition_file.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_taxonomy(buf.str());
  } catch (const Error& e) {
    throw Error(std::string(e.what()) + " (in " + definition_file.string() + ")");
  }
}

std::string serialize_taxonomy(const Taxonomy& t) {
  std::ostringstream out;
  for (const auto& c : t.categories)
    out << c.id << '\t' << c.name << '\t' << macro_group_name(c.group) << '\n';
  return out.str();
}

const Taxonomy& builtin_full() {
  static const Taxonomy t = parse_taxonomy(kFullTaxonomy);
  return t;
}

const Taxonomy& builtin_toy() {
  static const Taxonomy t = parse_taxonomy(kToyTaxonomy);
  return t;
}

}  // namespace prophy::tax
