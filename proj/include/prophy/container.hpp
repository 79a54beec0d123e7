// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "prophy/tensor.hpp"

namespace prophy::io {

enum class DType { f32, f64, i32 };

std::string dtype_name(DType d);
DType dtype_from(const std::string& s);

/// Named-array directory container: a `manifest` text file plus one raw
/// little-endian row-major binary file per array. Used for attention
/// records, corpus samples, and checkpoints.
class Container {
 public:
  struct Entry {
    std::string name;
    DType dtype = DType::f64;
    Shape shape;
    std::map<std::string, std::string> attrs;
    std::vector<double> data;  // canonical in-memory form
  };

  void set_meta(const std::string& key, const std::string& value);
  bool has_meta(const std::string& key) const { return meta_.count(key) != 0; }
  const std::string& meta(const std::string& key) const;
  const std::map<std::string, std::string>& all_meta() const { return meta_; }

  void add(const std::string& name, const Tensor& t, DType dtype = DType::f64,
           std::map<std::string, std::string> attrs = {});
  void add_i32(const std::string& name, const std::vector<std::int32_t>& v, Shape shape,
               std::map<std::string, std::string> attrs = {});

  bool has(const std::string& name) const;
  const Entry& entry(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  std::vector<std::int32_t> ints(const std::string& name) const;
  /// Names in insertion order.
  const std::vector<std::string>& names() const { return order_; }

  void save(const std::filesystem::path& dir) const;
  static Container load(const std::filesystem::path& dir);

 private:
  Entry& put(const std::string& name);

  std::map<std::string, std::string> meta_;
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
};

}  // namespace prophy::io
