// SPDX-License-Identifier: Apache-2.0
#include "prophy/container.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace prophy::io {

namespace {

constexpr const char* kMagic = "prophy-container 1";

static_assert(std::endian::native == std::endian::little,
              "container i/o assumes a little-endian host");

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '.' || c == '_' || c == '-';
    if (!ok) return false;
  }
  return true;
}

std::string shape_csv(const Shape& s) {
  std::ostringstream out;
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
  if (s.empty()) out << "";
  return out.str();
}

Shape parse_shape_csv(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoll(part));
    } catch (...) {
      throw Error("container: bad shape field '" + part + "'");
    }
  }
  return out;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
  }
  throw Error("container: unknown dtype");
}

}  // namespace

std::string dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
  }
  throw Error("container: unknown dtype");
}

DType dtype_from(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "i32") return DType::i32;
  throw Error("container: unknown dtype '" + s + "'");
}

void Container::set_meta(const std::string& key, const std::string& value) {
  require(valid_name(key), "container: bad meta key '" + key + "'");
  meta_[key] = value;
}

const std::string& Container::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw Error("container: missing meta key '" + key + "'");
  return it->second;
}

Container::Entry& Container::put(const std::string& name) {
  require(valid_name(name), "container: bad array name '" + name + "'");
  require(entries_.count(name) == 0, "container: duplicate array '" + name + "'");
  order_.push_back(name);
  Entry& e = entries_[name];
  e.name = name;
  return e;
}

void Container::add(const std::string& name, const Tensor& t, DType dtype,
                    std::map<std::string, std::string> attrs) {
  require(dtype != DType::i32, "container: add() stores floats; use add_i32");
  require(t.ndim() >= 1, "container: arrays need at least one dimension");
  Entry& e = put(name);
  e.dtype = dtype;
  e.shape = t.shape();
  e.attrs = std::move(attrs);
  e.data.assign(t.data(), t.data() + t.numel());
}

void Container::add_i32(const std::string& name, const std::vector<std::int32_t>& v, Shape shape,
                        std::map<std::string, std::string> attrs) {
  require(shape_numel(shape) == static_cast<std::int64_t>(v.size()),
          "container: i32 shape does not match data size");
  Entry& e = put(name);
  e.dtype = DType::i32;
  e.shape = std::move(shape);
  e.attrs = std::move(attrs);
  e.data.assign(v.begin(), v.end());
}

bool Container::has(const std::string& name) const { return entries_.count(name) != 0; }

const Container::Entry& Container::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("container: missing array '" + name + "'");
  return it->second;
}

Tensor Container::tensor(const std::string& name) const {
  const Entry& e = entry(name);
  return Tensor(e.shape, e.data);
}

std::vector<std::int32_t> Container::ints(const std::string& name) const {
  const Entry& e = entry(name);
  require(e.dtype == DType::i32, "container: array '" + name + "' is not i32");
  std::vector<std::int32_t> out(e.data.size());
  for (std::size_t i = 0; i < e.data.size(); ++i)
    out[i] = static_cast<std::int32_t>(e.data[i]);
  return out;
}

void Container::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ostringstream man;
  man << kMagic << "\n";
  for (const auto& [k, v] : meta_) man << "meta " << k << " " << v << "\n";
  for (const auto& name : order_) {
    const Entry& e = entries_.at(name);
    man << "array " << e.name << " " << dtype_name(e.dtype) << " " << shape_csv(e.shape) << " "
        << e.name << ".bin";
    for (const auto& [k, v] : e.attrs) man << " " << k << "=" << v;
    man << "\n";

    std::ofstream bin(dir / (e.name + ".bin"), std::ios::binary | std::ios::trunc);
    require(bin.good(), "container: cannot write " + (dir / (e.name + ".bin")).string());
    switch (e.dtype) {
      case DType::f64:
        bin.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * 8));
        break;
      case DType::f32: {
        std::vector<float> f(e.data.begin(), e.data.end());
        bin.write(reinterpret_cast<const char*>(f.data()),
                  static_cast<std::streamsize>(f.size() * 4));
        break;
      }
      case DType::i32: {
        std::vector<std::int32_t> v(e.data.size());
        for (std::size_t i = 0; i < e.data.size(); ++i) {
          const double x = e.data[i];
          require(std::nearbyint(x) == x, "container: non-integral value in i32 array " + e.name);
          v[i] = static_cast<std::int32_t>(x);
        }
        bin.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * 4));
        break;
      }
    }
    require(bin.good(), "container: short write for array " + e.name);
  }
  std::ofstream mf(dir / "manifest", std::ios::trunc);
  require(mf.good(), "container: cannot write manifest in " + dir.string());
  mf << man.str();
  require(mf.good(), "container: manifest write failed");
}

Container Container::load(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest");
  if (!mf.good()) throw Error("container: no manifest in " + dir.string());
  Container c;
  std::string line;
  if (!std::getline(mf, line) || line != kMagic)
    throw Error("container: bad magic in " + (dir / "manifest").string());
  std::size_t lineno = 1;
  while (std::getline(mf, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key;
      ls >> key;
      require(!key.empty(), "container: meta line " + std::to_string(lineno) + " missing key");
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      c.meta_[key] = value;
    } else if (tag == "array") {
      std::string name, dtype, shape, file;
      ls >> name >> dtype >> shape >> file;
      require(!file.empty(), "container: malformed array line " + std::to_string(lineno));
      Entry& e = c.put(name);
      e.dtype = dtype_from(dtype);
      e.shape = parse_shape_csv(shape);
      std::string attr;
      while (ls >> attr) {
        auto eq = attr.find('=');
        require(eq != std::string::npos,
                "container: malformed attribute '" + attr + "' on line " + std::to_string(lineno));
        e.attrs[attr.substr(0, eq)] = attr.substr(eq + 1);
      }

      const auto path = dir / file;
      std::ifstream bin(path, std::ios::binary | std::ios::ate);
      if (!bin.good()) throw Error("container: missing array file " + path.string());
      const auto bytes = static_cast<std::size_t>(bin.tellg());
      const auto n = static_cast<std::size_t>(shape_numel(e.shape));
      if (bytes != n * dtype_size(e.dtype))
        throw Error("container: array '" + name + "' has " + std::to_string(bytes) +
                    " bytes, manifest expects " + std::to_string(n * dtype_size(e.dtype)));
      bin.seekg(0);
      e.data.resize(n);
      switch (e.dtype) {
        case DType::f64:
          bin.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(bytes));
          break;
        case DType::f32: {
          std::vector<float> f(n);
          bin.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(bytes));
          for (std::size_t i = 0; i < n; ++i) e.data[i] = f[i];
          break;
        }
        case DType::i32: {
          std::vector<std::int32_t> v(n);
          bin.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
          for (std::size_t i = 0; i < n; ++i) e.data[i] = v[i];
          break;
        }
      }
      require(bin.good(), "container: short read for array " + name);
    } else {
      throw Error("container: unknown manifest tag '" + tag + "' on line " +
                  std::to_string(lineno));
    }
  }
  return c;
}

}  // namespace prophy::io
